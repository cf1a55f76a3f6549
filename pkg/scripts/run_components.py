"""Component ablation: baseline, pro-only, den-only and full distillation."""

import json
import time

from _common import open_store, parser

from pagkd.config import DESK
from pagkd.experiments import run_matrix, components_matrix

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    store = open_store(args)
    start = time.perf_counter()
    res = run_matrix(store, components_matrix(DESK), args.seeds, args.folds, out_dir=args.out / "components")
    print(json.dumps(res.trend, indent=2))
    print(f"{(time.perf_counter() - start) / 60:.1f} min")
