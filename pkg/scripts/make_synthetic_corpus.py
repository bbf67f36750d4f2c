"""Generate the train/dev/test tone corpora used by configs/synthetic_mock.yaml."""
import argparse
from pathlib import Path

from eendvc.synthetic import make_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--train", type=int, default=10)
    ap.add_argument("--dev", type=int, default=2)
    ap.add_argument("--test", type=int, default=3)
    ap.add_argument("--duration", type=float, default=60.0)
    args = ap.parse_args()

    out = Path(args.out)
    # same seeds and prefixes as eendvc.experiment.run_synthetic
    for split, n, seed, prefix in (("train", args.train, 1, "rec"), ("dev", args.dev, 2, "dev"),
                                   ("test", args.test, 3, "test")):
        print(make_corpus(out / split, n, args.duration, seed=seed, prefix=prefix))


if __name__ == "__main__":
    main()
