"""NBI-only vs WLI-only classifier AUC per fold, the dataset's modality-gap check."""

from _common import open_store, parser

from pagkd.config import DESK
from pagkd.experiments import verify_gap

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    store = open_store(args)
    for seed in args.seeds:
        for fold in args.folds or [0]:
            rep = verify_gap(store, DESK.updated(seed=seed), fold, raise_on_fail=False)
            print(f"seed {seed} fold {fold}: NBI {rep.nbi_auc:.3f} WLI {rep.wli_auc:.3f} "
                  f"{'ok' if rep.passed else 'below margin'}")
