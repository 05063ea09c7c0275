"""Full method on the ordered stream versus the same batches shuffled across domains.

Also prints the error per quarter of the stream, which shows whether the
model keeps improving as the episode goes on.
"""
import numpy as np
from common import base_parser, mean_std, seeds, setup

from dsbridge.engine import AdaptConfig, evaluate_frozen, run_episode
from dsbridge.stream import shuffle_mixed


def quarters(rep):
    e = np.array([r["batch_error"] for r in rep.rows])
    return " ".join(f"{100 * q.mean():6.2f}" for q in np.array_split(e, 4))


def main():
    args = base_parser(__doc__).parse_args()
    res = {"frozen": [], "ordered": [], "mixed": []}
    for s in seeds(args.seeds):
        params, stream, kb = setup(args, s)
        mixed = shuffle_mixed(stream, 200 + s)
        cfg = AdaptConfig(seed=s)
        reps = {"frozen": evaluate_frozen(params, mixed, seed=s),
                "ordered": run_episode(params, cfg, stream, kb),
                "mixed": run_episode(params, cfg, mixed, kb)}
        for k, rep in reps.items():
            res[k].append(rep.mean_error)
            print(f"s{s} {k:<8} {100 * rep.mean_error:6.2f}   quarters {quarters(rep)}", flush=True)
    for k, v in res.items():
        print(f"{k:<8} {mean_std(v)}")


if __name__ == "__main__":
    main()
