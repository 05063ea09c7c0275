"""Full method with 1, 2, 4 and 8 exemplars per class in the knowledge base."""
from common import base_parser, mean_std, seeds, setup

from dsbridge.engine import AdaptConfig, run_episode


def main():
    ap = base_parser(__doc__)
    ap.add_argument("--sizes", default="1,2,4,8")
    args = ap.parse_args()
    sizes = [int(m) for m in args.sizes.split(",")]
    res = {m: [] for m in sizes}
    for s in seeds(args.seeds):
        for m in sizes:
            params, stream, kb = setup(args, s, per_class=m)
            err = run_episode(params, AdaptConfig(seed=s), stream, kb).mean_error
            res[m].append(err)
            print(f"s{s} M={m}: {100 * err:.2f}", flush=True)
    for m, v in res.items():
        print(f"M={m}  {mean_std(v)}")


if __name__ == "__main__":
    main()
