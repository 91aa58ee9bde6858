"""Overfit 8 synthesized pairs for 600 steps and compare against the raw composites.

    python3 scripts/overfit_smoke.py --out runs/smoke
"""
import argparse
import json
import logging
import time
from pathlib import Path

from deepcomp import harness, synth


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--disc", choices=("patch", "resnet"), default="patch")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    corpus = synth.synthetic_corpus(out / "corpus", 12, size=64, seed=args.seed)
    synth.build_dataset(corpus, synth.filter_pool(16, args.seed), 8, 4, out / "data", seed=args.seed)
    # 8 pairs at batch 8 is one step per epoch
    cfg = harness.TrainConfig(data_dir=str(out / "data"), out_dir=str(out / "run"), epochs=args.steps,
                              batch_size=8, seed=args.seed, disc_kind=args.disc, eval_interval=50)
    t0 = time.time()
    _, log = harness.train(cfg)
    model, baseline = harness.evaluate(out / "run" / "final.dicc", out / "data" / "train", out / "eval")
    result = {"steps": len(log.steps), "final_recon": log.last("recon"), "seconds": round(time.time() - t0, 1),
              "model": model.to_dict()["aggregates"], "composite": baseline.to_dict()["aggregates"]}
    (out / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
