"""Train with the patch and the resnet discriminator under one config and report both.

    python3 scripts/compare_discriminators.py --out runs/compare --epochs 20
"""
import argparse
import logging
from pathlib import Path

from deepcomp import harness, synth


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--scenes", type=int, default=60)
    ap.add_argument("--train-count", type=int, default=100)
    ap.add_argument("--test-count", type=int, default=20)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    data = out / "data"
    if not (data / "test" / "manifest.json").exists():
        corpus = synth.synthetic_corpus(out / "corpus", args.scenes, size=64, seed=args.seed)
        synth.build_dataset(corpus, synth.filter_pool(64, args.seed), args.train_count, args.test_count, data,
                            seed=args.seed)
    cfg = harness.TrainConfig(data_dir=str(data), epochs=args.epochs, seed=args.seed, eval_slice=0)
    harness.compare_discriminators(cfg, out)
    print((out / "comparison.tsv").read_text(), end="")


if __name__ == "__main__":
    main()
