"""Command line entry point: ``sltrans {prepare,synth,train,translate,evaluate,sweep}``.

Exit codes: 0 ok, 2 configuration error, 3 data or I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import math
import sys
from pathlib import Path

from . import data, textproc
from .config import ConfigError, RunConfig, SweepSpec, load_config
from .decoding import translate
from .metrics import Blacklist, evaluate_report, format_report_tsv, per_sentence_rows
from .model import CheckpointError, FeatureDimMismatch, InvalidConfig, load_checkpoint
from .training import (CHECKPOINT_BEST, CHECKPOINT_LAST, NonFiniteLoss, read_log,
                       select_checkpoint, train)

log = logging.getLogger("sltrans")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TOKENIZER_FILE = "tokenizer.model"
TRUECASER_FILE = "truecaser.tsv"
RESOLVED_CONFIG = "config.resolved"


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _blacklist(cfg: RunConfig) -> Blacklist:
    if cfg.eval.blacklist:
        return Blacklist.from_file(cfg.path(cfg.eval.blacklist))
    return Blacklist.default()


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(cfg.dumps(), encoding="utf-8")


def _load_prepared(out: Path):
    try:
        tok = textproc.TokenizerModel.load(out / TOKENIZER_FILE)
        casing = textproc.CasingModel.load(out / TRUECASER_FILE)
    except FileNotFoundError as exc:
        raise CommandError(EXIT_DATA, f"missing prepare artifact: {exc.filename}") from None
    return tok, casing


# -------------------------------------------------------------------- commands

def cmd_prepare(cfg: RunConfig, out: Path) -> dict:
    train_path = cfg.path(cfg.data.train)
    records = data.parse_manifest(train_path)
    dims = {data.verify_manifest(train_path, records)}
    for split in ("valid", "test"):
        p = cfg.path(getattr(cfg.data, split))
        if p.exists():
            dims.add(data.verify_manifest(p))
    dims.discard(0)
    if len(dims) > 1:
        raise data.DataError(f"feature dims differ across splits: {sorted(dims)}")
    tok = textproc.train_tokenizer([textproc.lowercase(r.translation) for r in records],
                                   cfg.data.vocab_size)
    casing = textproc.train_truecaser([r.translation for r in records])
    out.mkdir(parents=True, exist_ok=True)
    tok.save(out / TOKENIZER_FILE)
    casing.save(out / TRUECASER_FILE)
    _write_resolved(cfg, out)
    print(f"prepared: {len(records)} training sentences, vocab {tok.vocab_size}, "
          f"{len(casing.casing_map)} truecase entries")
    return {"tokenizer": out / TOKENIZER_FILE, "truecaser": out / TRUECASER_FILE}


def cmd_train(cfg: RunConfig, out: Path):
    tok, casing = _load_prepared(out)
    cfg.model.vocab_size = tok.vocab_size
    cfg.validate()
    max_frames = cfg.model.max_source_positions
    train_ex = data.load_examples(cfg.path(cfg.data.train), tok, max_frames)
    valid_ex = data.load_examples(cfg.path(cfg.data.valid), tok, max_frames)
    dim = train_ex[0].features.shape[1] if train_ex else cfg.model.feature_dim
    if dim != cfg.model.feature_dim:
        raise FeatureDimMismatch(f"data has feature dim {dim}, model.feature_dim={cfg.model.feature_dim}")
    _write_resolved(cfg, out)
    result = train(cfg.model, cfg.train, train_ex, valid_ex, tok, casing, out,
                   decode=cfg.decode, blacklist=_blacklist(cfg))
    if result.log:
        best = max(result.log, key=lambda e: e["rbleu"])
        print(f"trained {result.steps} steps; best validation rBLEU {best['rbleu']:.2f} "
              f"(BLEU {best['bleu']:.2f}) at step {best['step']}")
    else:
        print(f"trained {result.steps} steps; no validation run")
    return result


def _split_manifest(cfg: RunConfig, split: str | None, manifest: str | None) -> Path:
    if manifest:
        return Path(manifest)
    if split not in ("train", "valid", "test"):
        raise ConfigError(f"unknown split {split!r}")
    return cfg.path(getattr(cfg.data, split))


def _resolve_checkpoint(out: Path, checkpoint: str | None) -> Path:
    if checkpoint:
        return Path(checkpoint)
    log_path = out / "train_log.jsonl"
    if log_path.exists() and log_path.read_text().strip():
        return out / select_checkpoint(read_log(log_path))
    for name in (CHECKPOINT_BEST, CHECKPOINT_LAST):
        if (out / name).exists():
            return out / name
    raise CommandError(EXIT_DATA, f"no checkpoint found in {out}")


def cmd_translate(cfg: RunConfig, out: Path, split="test", manifest=None, checkpoint=None,
                  output=None) -> Path:
    tok, casing = _load_prepared(out)
    ckpt = _resolve_checkpoint(out, checkpoint)
    model, _ = load_checkpoint(ckpt)
    examples = data.load_examples(_split_manifest(cfg, split, manifest),
                                  max_frames=model.cfg.max_source_positions)
    hyps = translate(model, [e.features for e in examples], tok, casing, beam=cfg.decode.beam,
                     max_len=cfg.decode.max_len, alpha=cfg.decode.alpha,
                     chunk=cfg.decode.batch_size)
    dest = Path(output) if output else out / f"translations.{split or 'custom'}.txt"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    print(f"translated {len(hyps)} inputs with {ckpt.name} -> {dest}")
    return dest


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")


def cmd_evaluate(cfg: RunConfig, hyps_path, split="test", manifest=None, refs_path=None,
                 per_sentence=None) -> str:
    hyps = _read_lines(hyps_path)
    if refs_path:
        refs = _read_lines(refs_path)
        ids = [str(i) for i in range(len(refs))]
    else:
        records = data.parse_manifest(_split_manifest(cfg, split, manifest))
        refs = [r.translation for r in records]
        ids = [r.id for r in records]
    bl = _blacklist(cfg)
    report = evaluate_report(hyps, refs, bl)
    table = format_report_tsv({split or "test": report.row()})
    sys.stdout.write(table)
    if per_sentence:
        rows = per_sentence_rows(ids, hyps, refs, bl)
        Path(per_sentence).write_text(
            "id\tBLEU\trBLEU\n" + "".join(f"{i}\t{b:.2f}\t{r:.2f}\n" for i, b, r in rows),
            encoding="utf-8")
    return table


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    manifests = data.generate_synthetic(cfg.synth, out)
    counts = {}
    frames = 0
    for split, path in manifests.items():
        records = data.parse_manifest(path)
        counts[split] = len(records)
        frames += sum(r.n_frames for r in records)
    print(f"synthetic dataset in {out}: examples "
          + ", ".join(f"{k}={v}" for k, v in counts.items())
          + f"; symbols={cfg.synth.n_symbols}; total_frames={frames}")
    return {"manifests": manifests, "counts": counts, "frames": frames}


def _trial(cfg: RunConfig, out: Path) -> tuple[float, float]:
    with contextlib.redirect_stdout(sys.stderr):
        cmd_prepare(cfg, out)
        result = cmd_train(cfg, out)
    if not result.log:
        raise CommandError(EXIT_CONFIG, "trial ran no validation (train.max_steps = 0?)")
    best = result.log[0]
    for e in result.log:
        if e["rbleu"] > best["rbleu"]:
            best = e
    return best["rbleu"], best["bleu"]


def cmd_sweep(cfg: RunConfig, out: Path, spec: SweepSpec) -> tuple[list, dict]:
    """Tune one key at a time in the listed order, fixing each key's best value by
    validation rBLEU (ties keep the value listed first) before moving on."""
    out.mkdir(parents=True, exist_ok=True)
    fixed: dict[str, str] = {}
    rows = []
    failures = []
    trial_id = 0
    for key, values in spec.axes:
        best_value, best_score = None, -math.inf
        for value in values:
            overrides = dict(fixed)
            overrides[key] = value
            trial_cfg = cfg.copy().update(overrides)
            trial_dir = out / "trials" / f"trial_{trial_id:03d}"
            try:
                trial_cfg.validate()
                rbleu, bleu = _trial(trial_cfg, trial_dir)
            except Exception as exc:  # noqa: BLE001 - every trial failure is recorded
                try:
                    code = _exit_code(exc)
                except Exception:  # noqa: BLE001 - unmapped errors count as numerical
                    code = EXIT_NUMERIC
                failures.append(code)
                log.warning("trial %d (%s) failed: %s", trial_id, overrides, exc)
                rbleu, bleu = math.nan, math.nan
            rows.append((trial_id, overrides, rbleu, bleu))
            if not math.isnan(rbleu) and rbleu > best_score:
                best_value, best_score = value, rbleu
            trial_id += 1
        if best_value is not None:
            fixed[key] = best_value
    lines = ["trial_id\toverrides\tval_rbleu\tval_bleu"]
    for tid, ov, r, b in rows:
        ov_text = ",".join(f"{k}={v}" for k, v in ov.items())
        lines.append(f"{tid}\t{ov_text}\t{r:.2f}\t{b:.2f}")
    (out / "sweep_results.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    final = cfg.copy().update(fixed)
    (out / "sweep_best.cfg").write_text(final.dumps(), encoding="utf-8")
    print("\n".join(lines))
    print("fixed: " + ", ".join(f"{k}={v}" for k, v in fixed.items()))
    if len(failures) == len(rows):
        raise CommandError(failures[-1] if failures else EXIT_CONFIG, "every sweep trial failed")
    return rows, fixed


# ----------------------------------------------------------------- plumbing

def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CommandError):
        return exc.code
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, InvalidConfig)):
        return EXIT_CONFIG
    if isinstance(exc, (textproc.CorpusTooSmall, data.DataError, FeatureDimMismatch,
                        CheckpointError, OSError, textproc.TokenizerFormatError, ValueError)):
        return EXIT_DATA
    raise exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int, help="overrides train.seed and synth.seed")
    common.add_argument("--out-dir", default=".", help="run directory")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sltrans", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="train tokenizer and truecaser, check features")
    sub.add_parser("synth", parents=[common], help="write a synthetic parallel corpus")
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("translate", parents=[common], help="decode a split")
    p.add_argument("--split", default="test")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--output")
    p = sub.add_parser("evaluate", parents=[common], help="score a hypothesis file")
    p.add_argument("--hyps", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--manifest")
    p.add_argument("--refs", help="plain text references, one per line")
    p.add_argument("--per-sentence", help="write per-sentence BLEU/rBLEU TSV here")
    p = sub.add_parser("sweep", parents=[common], help="sequential coordinate grid search")
    p.add_argument("--sweep", required=True, help="file of 'key = v1, v2, ...' lines")
    return parser


def _resolve(args) -> RunConfig:
    overrides = []
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides.append((k.strip(), v.strip()))
    if args.seed is not None:
        overrides += [("train.seed", str(args.seed)), ("synth.seed", str(args.seed))]
    return load_config(args.config, overrides)


def run(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out_dir)
    if args.command == "prepare":
        cmd_prepare(cfg, out)
    elif args.command == "synth":
        cmd_synth(cfg, out)
    elif args.command == "train":
        cmd_train(cfg, out)
    elif args.command == "translate":
        cmd_translate(cfg, out, args.split, args.manifest, args.checkpoint, args.output)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.hyps, args.split, args.manifest, args.refs, args.per_sentence)
    elif args.command == "sweep":
        try:
            text = Path(args.sweep).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read sweep file: {exc}") from None
        cmd_sweep(cfg, out, SweepSpec.parse(text))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        with limiter:
            return run(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        print(f"sltrans {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
