"""Pairing-free group-level distillation from an NBI teacher into a WLI student.

Everything runs on a small numpy autodiff core (:mod:`pagkd.tensor`).
"""

__version__ = "0.1.0"
