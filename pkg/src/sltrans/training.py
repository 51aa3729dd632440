"""Optimization recipe: smoothed cross-entropy, Adam with decoupled weight
decay, warmup + cosine warm restarts, periodic validation and rBLEU-based
checkpoint selection."""
from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Example, make_batches
from .decoding import translate
from .metrics import Blacklist, evaluate_report
from .model import DropoutContext, ModelConfig, build_model, save_checkpoint
from .numerics import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_LAST = "checkpoint_last.sltm"
CHECKPOINT_BEST = "checkpoint_best.sltm"
TRAIN_LOG = "train_log.jsonl"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class BadTarget(ValueError):
    pass


class NoValidations(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    label_smoothing: float = 0.1
    peak_lr: float = 1e-3
    min_lr: float = 1e-7
    warmup_steps: int = 2000
    restart_period: int = 17000
    max_steps: int = 100000
    scheduler: str = "cosine_restarts"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    validate_every_epochs: int = 2
    seed: int = 1
    keep_checkpoints: bool = False

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not self.min_lr < self.peak_lr:
            raise ValueError("min_lr must be below peak_lr")
        if self.scheduler not in ("cosine_restarts", "inverse_sqrt"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.batch_size < 1 or self.max_steps < 0 or self.validate_every_epochs < 1:
            raise ValueError("batch_size, max_steps and validate_every_epochs out of range")
        return self


@dataclass
class DecodeConfig:
    beam: int = 5
    max_len: int = 256
    alpha: float = 1.0
    batch_size: int = 64


# ----------------------------------------------------------------------- loss

def label_smoothed_ce(logits: Tensor, targets, eps: float, pad_id: int = 0) -> Tensor:
    """Mean smoothed NLL over non-pad positions.

    The target distribution puts ``1 - eps`` on the gold id and ``eps / (V - 1)``
    on every other id.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.size and (targets.max() >= v or targets.min() < 0):
        raise BadTarget(f"target id outside [0, {v})")
    keep = targets != pad_id
    n = int(keep.sum())
    off = eps / (v - 1) if v > 1 else 0.0
    q = np.full(logits.shape, off, dtype=logits.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - eps, axis=-1)
    q *= keep[..., None]
    lp = nx.log_softmax(logits, axis=-1)
    return nx.scale(nx.sum(nx.mul(lp, q)), -1.0 / max(n, 1))


# ------------------------------------------------------------------ schedule

def lr_at(cfg: TrainConfig, step: int) -> float:
    warm = cfg.warmup_steps
    if cfg.scheduler == "inverse_sqrt":
        if warm <= 0:
            return cfg.peak_lr / math.sqrt(max(step, 1))
        if step == 0:
            return 0.0
        return cfg.peak_lr * min(step / warm, math.sqrt(warm / step))
    if step < warm:
        return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * step / warm
    period = cfg.restart_period if cfg.restart_period > 0 else max(cfg.max_steps - warm, 1)
    t = (step - warm) % period
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t / period))


# ----------------------------------------------------------------- optimizer

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def global_norm(grads: dict) -> float:
    return math.sqrt(float(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))


def adam_step(state: OptimState, params: dict, grads: dict, lr: float, cfg: TrainConfig) -> float:
    """Update ``params`` and ``state`` in place. Returns the pre-clip gradient norm."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise nx.ShapeMismatch(f"gradient for {k} has shape {g.shape}, param {params[k].shape}")
    norm = global_norm(grads)
    clip = 1.0
    if cfg.clip_norm > 0 and norm > cfg.clip_norm:
        clip = cfg.clip_norm / (norm + 1e-6)
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        elif clip != 1.0:
            g = g * clip
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= (lr * upd).astype(p.dtype)
        if cfg.weight_decay:
            p.data -= (lr * cfg.weight_decay) * p.data
    return norm


# ------------------------------------------------------------------ training

def batch_loss(model, batch, eps: float, drop=None) -> Tensor:
    memory = model.encode(batch.src, batch.src_mask, drop)
    logits = model.decode(memory, batch.src_mask, batch.prev_tokens, drop)
    return label_smoothed_ce(logits, batch.gold, eps)


@dataclass
class TrainResult:
    out_dir: Path
    losses: list
    log: list
    steps: int
    best_checkpoint: Path | None


def select_checkpoint(log_entries) -> str:
    """Checkpoint of the validation with the highest rBLEU; ties go to the earliest."""
    if isinstance(log_entries, (str, Path)):
        log_entries = read_log(log_entries)
    entries = list(log_entries)
    if not entries:
        raise NoValidations("training log has no validation entries")
    best = 0
    for i, e in enumerate(entries):
        if e["rbleu"] > entries[best]["rbleu"]:
            best = i
    return entries[best]["checkpoint"]


def read_log(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def validate_model(model, examples: list[Example], tokenizer, casing, decode: DecodeConfig,
                   blacklist: Blacklist):
    hyps = translate(model, [e.features for e in examples], tokenizer, casing,
                     beam=decode.beam, max_len=decode.max_len, alpha=decode.alpha,
                     chunk=decode.batch_size)
    return evaluate_report(hyps, [e.translation for e in examples], blacklist), hyps


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_examples: list[Example],
          valid_examples: list[Example], tokenizer, casing, out_dir,
          decode: DecodeConfig | None = None, blacklist: Blacklist | None = None,
          init_model=None) -> TrainResult:
    """Train from scratch, validating every ``validate_every_epochs`` epochs.

    Each validation appends a JSON line to ``train_log.jsonl``, rewrites
    ``checkpoint_last.sltm`` and copies it to ``checkpoint_best.sltm`` when
    validation rBLEU strictly improves. A final validation runs at
    ``max_steps`` if the last epoch boundary did not coincide with it.
    """
    train_cfg.validate()
    decode = decode or DecodeConfig()
    blacklist = blacklist or Blacklist.default()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / TRAIN_LOG
    log_path.write_text("", encoding="utf-8")

    model = init_model or build_model(model_cfg, seed=train_cfg.seed)
    params = model.params
    state = OptimState.zeros_like(params)
    last_path, best_path = out / CHECKPOINT_LAST, out / CHECKPOINT_BEST

    def train_state(epoch):
        return {"step": state.step, "epoch": epoch, "m": state.m, "v": state.v}

    if train_cfg.max_steps == 0:
        save_checkpoint(last_path, model, train_state(0))
        return TrainResult(out, [], [], 0, None)

    losses: list[float] = []
    entries: list[dict] = []
    best_rbleu = -math.inf
    window: list[float] = []
    epoch = 0
    step = 0
    t0 = time.time()

    def run_validation():
        nonlocal best_rbleu
        report, _ = validate_model(model, valid_examples, tokenizer, casing, decode, blacklist)
        save_checkpoint(last_path, model, train_state(epoch))
        ckpt = CHECKPOINT_LAST
        if train_cfg.keep_checkpoints:
            ckpt = f"checkpoint_step{step}.sltm"
            shutil.copyfile(last_path, out / ckpt)
        if report.rbleu > best_rbleu:
            best_rbleu = report.rbleu
            shutil.copyfile(last_path, best_path)
            if not train_cfg.keep_checkpoints:
                ckpt = CHECKPOINT_BEST
        entry = {"step": step, "epoch": epoch, "rbleu": report.rbleu, "bleu": report.bleu.score,
                 "bleu1": report.bleu1, "bleu2": report.bleu2, "bleu3": report.bleu3,
                 "loss": float(np.mean(window)) if window else None,
                 "lr": lr_at(train_cfg, max(step - 1, 0)), "checkpoint": ckpt}
        window.clear()
        entries.append(entry)
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")
        log.info("step %d epoch %d rBLEU %.2f BLEU %.2f (%.0fs)", step, epoch,
                 report.rbleu, report.bleu.score, time.time() - t0)

    validated_at = -1
    while step < train_cfg.max_steps:
        for batch in make_batches(train_examples, train_cfg.batch_size, train_cfg.seed, epoch,
                                  max_target=model_cfg.max_target_positions - 1):
            if step >= train_cfg.max_steps:
                break
            lr = lr_at(train_cfg, step)
            drop = DropoutContext(model_cfg.dropout, train_cfg.seed, step) if model_cfg.dropout else None
            loss = batch_loss(model, batch, train_cfg.label_smoothing, drop)
            value = float(loss.data)
            if not math.isfinite(value):
                log.error("non-finite loss at step %d", step)
                raise NonFiniteLoss(step, value)
            for p in params.values():
                p.grad = None
            nx.backward(loss)
            adam_step(state, params, {k: p.grad for k, p in params.items() if p.grad is not None},
                      lr, train_cfg)
            losses.append(value)
            window.append(value)
            step += 1
        else:
            epoch += 1
            if epoch % train_cfg.validate_every_epochs == 0:
                run_validation()
                validated_at = step
            continue
        break
    if validated_at != step:
        run_validation()
    return TrainResult(out, losses, entries, step, best_path if best_path.exists() else None)
