"""Train the tiny model on the synthetic corpus and report held-out BLEU / rBLEU.

    python scripts/synthetic_learnability.py --work runs/learnability [--steps 4000]

Runs the same CLI stages a user would: synth, prepare, train, translate, evaluate.
"""
import argparse
import sys
import time
from pathlib import Path

from sltrans import cli
from sltrans.config import parse_pairs

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/learnability")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--steps", type=int, help="override train.max_steps")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    work = Path(args.work).resolve()
    synth = work / "synth"
    pairs = [(k, v) for k, v in parse_pairs((ROOT / "configs" / "synthetic.cfg").read_text())
             if k not in ("data.train", "data.valid", "data.test")]
    pairs += [(f"data.{s}", str(synth / f"{s}.tsv")) for s in ("train", "valid", "test")]
    if args.steps is not None:
        pairs.append(("train.max_steps", str(args.steps)))
    work.mkdir(parents=True, exist_ok=True)
    cfg = work / "run.cfg"
    cfg.write_text("".join(f"{k} = {v}\n" for k, v in pairs))

    common = ["--config", str(cfg), "--out-dir", str(work), "--seed", str(args.seed),
              "--threads", str(args.threads)]
    stages = [["synth", "--out-dir", str(synth), "--seed", str(args.seed)],
              ["prepare"] + common, ["train"] + common, ["translate"] + common,
              ["evaluate", "--hyps", str(work / "translations.test.txt"),
               "--per-sentence", str(work / "per_sentence.tsv")] + common]
    for argv in stages:
        t0 = time.perf_counter()
        code = cli.main(argv)
        print(f"[{argv[0]}] exit {code} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
