"""Component ablation: frozen source and rows Ex1..Ex7 on the ordered 8-domain stream."""
import time

from common import base_parser, fmt_row, mean_std, seeds, setup

from dsbridge.engine import ABLATION_GRID, AdaptConfig, evaluate_frozen, run_episode


def main():
    ap = base_parser(__doc__)
    ap.add_argument("--rows", default=",".join(ABLATION_GRID))
    args = ap.parse_args()
    rows = args.rows.split(",")
    results = {name: [] for name in ["frozen", *rows]}
    for s in seeds(args.seeds):
        params, stream, kb = setup(args, s)
        rep = evaluate_frozen(params, stream, seed=s)
        results["frozen"].append(rep.mean_error)
        print(fmt_row(f"s{s} frozen", rep.domain_errors.values()), f"| {100 * rep.mean_error:.2f}")
        for name in rows:
            t0 = time.perf_counter()
            rep = run_episode(params, AdaptConfig(parts=ABLATION_GRID[name], seed=s), stream, kb)
            results[name].append(rep.mean_error)
            print(fmt_row(f"s{s} {name}", rep.domain_errors.values()),
                  f"| {100 * rep.mean_error:.2f}  ({time.perf_counter() - t0:.0f}s)", flush=True)
    print("\nmean error over seeds (%)")
    for name, vals in results.items():
        parts = "source" if name == "frozen" else "+".join(ABLATION_GRID[name])
        print(f"{name:<7} {mean_std(vals)}  {parts}")


if __name__ == "__main__":
    main()
