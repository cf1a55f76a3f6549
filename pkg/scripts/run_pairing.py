"""Pairing ablation: group-level, image-level and mixed joint distillation."""

import json

from _common import open_store, parser

from pagkd.config import DESK
from pagkd.experiments import run_matrix, pairing_matrix

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    res = run_matrix(open_store(args), pairing_matrix(DESK), args.seeds, args.folds, out_dir=args.out / "pairing")
    print(json.dumps(res.trend, indent=2))
