"""Threshold sweep over tau1 (tau2 = 0.7) and tau2 (tau1 = 0.3)."""

import json

from _common import open_store, parser

from pagkd.config import DESK
from pagkd.experiments import run_matrix, tau_sweep

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--epochs", type=int, default=DESK.epochs)
    args = p.parse_args()
    res = run_matrix(open_store(args), tau_sweep(DESK.updated(epochs=args.epochs)), args.seeds, args.folds,
                     out_dir=args.out / "tau")
    print(json.dumps(res.trend, indent=2))
