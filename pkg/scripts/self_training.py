"""Swap the teacher-student term for entropy minimisation (norm-only updates)
and compare the full method with its entropy-only baseline."""
from common import base_parser, mean_std, seeds, setup

from dsbridge.engine import PARTS, AdaptConfig, run_episode


def main():
    args = base_parser(__doc__).parse_args()
    res = {"entropy-only": [], "full": []}
    for s in seeds(args.seeds):
        params, stream, kb = setup(args, s)
        base = run_episode(params, AdaptConfig(parts=("st",), st_variant="entropy_min", seed=s), stream, kb)
        full = run_episode(params, AdaptConfig(parts=PARTS, st_variant="entropy_min", seed=s), stream, kb)
        res["entropy-only"].append(base.mean_error)
        res["full"].append(full.mean_error)
        print(f"s{s}: entropy-only {100 * base.mean_error:.2f}  full {100 * full.mean_error:.2f}  "
              f"delta {100 * (full.mean_error - base.mean_error):+.2f}", flush=True)
    for k, v in res.items():
        print(f"{k:<13} {mean_std(v)}")


if __name__ == "__main__":
    main()
