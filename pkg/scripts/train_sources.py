"""Train (or load) the source models used by the other scripts and report clean accuracy."""
from common import base_parser, seeds, source

from dsbridge.engine import clean_accuracy


def main():
    args = base_parser(__doc__).parse_args()
    for s in seeds(args.seeds):
        print(f"seed {s}: clean accuracy {clean_accuracy(source(args.sources, s)):.4f}")


if __name__ == "__main__":
    main()
