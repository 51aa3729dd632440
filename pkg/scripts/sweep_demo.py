"""Coordinate sweep on a small synthetic corpus, including one unstable learning rate.

    python scripts/sweep_demo.py --work runs/sweep

The sweep keeps, per key, the candidate with the best validation rBLEU; the 5e-1
learning rate diverges or stalls and should lose.
"""
import argparse
import sys
from pathlib import Path

from sltrans import cli

SYNTH = {"synth.n_symbols": 10, "synth.frames_per_symbol": 2, "synth.feature_dim": 16,
         "synth.min_len": 2, "synth.max_len": 5, "synth.n_train": 300, "synth.n_val": 40,
         "synth.n_test": 40}
BASE = {"data.vocab_size": 27, "model.encoder_layers": 1, "model.decoder_layers": 1,
        "model.embed_dim": 32, "model.ffn_dim": 64, "model.attention_heads": 2,
        "model.feature_dim": 16, "model.dropout": 0.1, "train.warmup_steps": 100,
        "train.restart_period": 600, "train.max_steps": 600, "decode.max_len": 12}
SWEEP = "train.peak_lr = 5e-1, 1e-3, 3e-3\nmodel.dropout = 0.0, 0.1\n"


def flags(d):
    return [a for k, v in d.items() for a in ("--set", f"{k}={v}")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="runs/sweep")
    args = ap.parse_args()
    work = Path(args.work).resolve()
    synth = work / "synth"
    if cli.main(["synth", "--out-dir", str(synth)] + flags(SYNTH)):
        return 1
    cfg = work / "base.cfg"
    cfg.write_text("".join(f"data.{s} = {synth / (s + '.tsv')}\n" for s in ("train", "valid", "test"))
                   + "".join(f"{k} = {v}\n" for k, v in BASE.items()))
    (work / "sweep.txt").write_text(SWEEP)
    return cli.main(["sweep", "--config", str(cfg), "--out-dir", str(work / "out"),
                     "--sweep", str(work / "sweep.txt"), "--threads", "1"])


if __name__ == "__main__":
    sys.exit(main())
