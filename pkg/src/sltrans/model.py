"""Asymmetric Transformer encoder-decoder over continuous feature frames.

Pre-norm residual blocks, sinusoidal positions, ReLU feed-forward layers and
an output projection tied to the target embedding table.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CHECKPOINT_MAGIC = b"SLTM"
CHECKPOINT_VERSION = 1


class InvalidConfig(ValueError):
    pass


class FeatureDimMismatch(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder_layers: int = 6
    decoder_layers: int = 3
    embed_dim: int = 256
    ffn_dim: int = 1024
    attention_heads: int = 4
    feature_dim: int = 1024
    vocab_size: int = 7000
    dropout: float = 0.3
    max_source_positions: int = 1024
    max_target_positions: int = 256

    def validate(self) -> "ModelConfig":
        for name in ("embed_dim", "ffn_dim", "attention_heads", "feature_dim",
                     "vocab_size", "max_source_positions", "max_target_positions"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise InvalidConfig("layer counts must be non-negative")
        if self.embed_dim % self.attention_heads:
            raise InvalidConfig(
                f"embed_dim={self.embed_dim} not divisible by attention_heads={self.attention_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidConfig("dropout must be in [0, 1)")
        return self

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, v = line.split("=", 1)
            if k not in types:
                raise CheckpointError(f"unknown model config key {k!r}")
            kw[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kw)


def count_params(cfg: ModelConfig) -> int:
    d, f = cfg.embed_dim, cfg.ffn_dim
    attn = 4 * (d * d + d)
    ln = 2 * d
    ffn = d * f + f + f * d + d
    total = (cfg.feature_dim + 1) * d + cfg.vocab_size * d
    total += cfg.encoder_layers * (attn + 2 * ln + ffn)
    total += cfg.decoder_layers * (2 * attn + 3 * ln + ffn)
    total += ln * (cfg.encoder_layers > 0) + ln * (cfg.decoder_layers > 0)
    return total


def sinusoidal_positions(n: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rates = np.power(10000.0, -np.arange(0, dim, 2) / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table.astype(dtype)


def _param_shapes(cfg: ModelConfig):
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes = {"input.weight": (cfg.feature_dim, d), "input.bias": (d,)}

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.{p}.weight"] = (d, d)
            shapes[f"{prefix}.{p}.bias"] = (d,)

    def lnorm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.fc1.weight"] = (d, f)
        shapes[f"{prefix}.fc1.bias"] = (f,)
        shapes[f"{prefix}.fc2.weight"] = (f, d)
        shapes[f"{prefix}.fc2.bias"] = (d,)

    for i in range(cfg.encoder_layers):
        attn(f"enc.{i}.self_attn")
        lnorm(f"enc.{i}.ln1")
        lnorm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    if cfg.encoder_layers:
        lnorm("enc.ln")
    for i in range(cfg.decoder_layers):
        attn(f"dec.{i}.self_attn")
        attn(f"dec.{i}.cross_attn")
        lnorm(f"dec.{i}.ln1")
        lnorm(f"dec.{i}.ln2")
        lnorm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    if cfg.decoder_layers:
        lnorm("dec.ln")
    shapes["embed.weight"] = (cfg.vocab_size, d)
    return shapes


class DropoutContext:
    """Hands out reproducible dropout keys (seed, step, site) during one forward pass."""

    def __init__(self, p: float, seed: int, step: int):
        self.p = p
        self.seed = seed
        self.step = step
        self.site = 0

    def __call__(self, x: Tensor) -> Tensor:
        self.site += 1
        return nx.dropout(x, self.p, (self.seed, self.step, self.site))


def _no_dropout(x: Tensor) -> Tensor:
    return x


class Transformer:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        dtype = params["embed.weight"].dtype
        self._src_pos = sinusoidal_positions(cfg.max_source_positions, cfg.embed_dim, dtype)
        self._tgt_pos = sinusoidal_positions(cfg.max_target_positions, cfg.embed_dim, dtype)

    @property
    def dtype(self):
        return self.params["embed.weight"].dtype

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_params(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def astype(self, dtype) -> "Transformer":
        return Transformer(self.cfg, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                                      for k, v in self.params.items()})

    # ------------------------------------------------------------ blocks
    def _linear(self, x, prefix):
        return nx.add(nx.matmul(x, self.params[prefix + ".weight"]), self.params[prefix + ".bias"])

    def _ln(self, x, prefix):
        return nx.layer_norm(x, self.params[prefix + ".gain"], self.params[prefix + ".bias"])

    def _attention(self, xq, xkv, mask, prefix):
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.cfg.attention_heads
        dh = d // h

        def heads(x, t):
            return nx.transpose(nx.reshape(x, (b, t, h, dh)), (0, 2, 1, 3))

        q = heads(self._linear(xq, prefix + ".q"), tq)
        k = heads(self._linear(xkv, prefix + ".k"), tk)
        v = heads(self._linear(xkv, prefix + ".v"), tk)
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        probs = nx.softmax(scores, axis=-1, mask=mask)
        ctx = nx.reshape(nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3)), (b, tq, d))
        return self._linear(ctx, prefix + ".o")

    def _ffn(self, x, prefix, drop):
        hdn = nx.relu(self._linear(x, prefix + ".fc1"))
        return self._linear(drop(hdn), prefix + ".fc2")

    # ------------------------------------------------------------ forward
    def encode(self, feats, src_mask, drop=None) -> Tensor:
        """Encode ``feats`` [B,T,D] with ``src_mask`` [B,T] (True = real frame)."""
        drop = drop or _no_dropout
        feats = np.asarray(feats)
        src_mask = np.asarray(src_mask, dtype=bool)
        cfg = self.cfg
        if feats.ndim != 3 or feats.shape[-1] != cfg.feature_dim:
            raise FeatureDimMismatch(
                f"expected features [B,T,{cfg.feature_dim}], got {feats.shape}")
        t = feats.shape[1]
        if t > cfg.max_source_positions:
            raise SequenceTooLong(f"{t} frames > max_source_positions={cfg.max_source_positions}")
        x = self._linear(Tensor(feats.astype(self.dtype, copy=False)), "input")
        x = nx.add(nx.scale(x, math.sqrt(cfg.embed_dim)), self._src_pos[:t])
        x = drop(x)
        key_mask = src_mask[:, None, None, :]
        for i in range(cfg.encoder_layers):
            p = f"enc.{i}"
            hdn = self._ln(x, p + ".ln1")
            x = nx.add(x, drop(self._attention(hdn, hdn, key_mask, p + ".self_attn")))
            hdn = self._ln(x, p + ".ln2")
            x = nx.add(x, drop(self._ffn(hdn, p + ".ffn", drop)))
        if cfg.encoder_layers:
            x = self._ln(x, "enc.ln")
        return x

    def decode(self, memory: Tensor, memory_mask, prev_tokens, drop=None) -> Tensor:
        """Teacher-forced logits [B,U,V] for ``prev_tokens`` [B,U] (starting with bos)."""
        drop = drop or _no_dropout
        cfg = self.cfg
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        u = prev_tokens.shape[1]
        if u > cfg.max_target_positions:
            raise SequenceTooLong(f"{u} target tokens > max_target_positions")
        if memory.shape[0] != prev_tokens.shape[0]:
            raise nx.ShapeMismatch("memory and prev_tokens batch sizes differ")
        emb = self.params["embed.weight"]
        y = nx.scale(nx.embedding(emb, prev_tokens), math.sqrt(cfg.embed_dim))
        y = drop(nx.add(y, self._tgt_pos[:u]))
        causal = np.tril(np.ones((u, u), dtype=bool))[None, None]
        mem_mask = np.asarray(memory_mask, dtype=bool)[:, None, None, :]
        for i in range(cfg.decoder_layers):
            p = f"dec.{i}"
            hdn = self._ln(y, p + ".ln1")
            y = nx.add(y, drop(self._attention(hdn, hdn, causal, p + ".self_attn")))
            hdn = self._ln(y, p + ".ln2")
            y = nx.add(y, drop(self._attention(hdn, memory, mem_mask, p + ".cross_attn")))
            hdn = self._ln(y, p + ".ln3")
            y = nx.add(y, drop(self._ffn(hdn, p + ".ffn", drop)))
        if cfg.decoder_layers:
            y = self._ln(y, "dec.ln")
        return nx.matmul(y, nx.transpose(emb, (1, 0)))


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Transformer:
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name == "embed.weight":
            w = rng.normal(0.0, cfg.embed_dim ** -0.5, size=shape)
        elif name.endswith(".gain"):
            w = np.ones(shape)
        elif name.endswith(".bias"):
            w = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            w = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(w.astype(dtype), requires_grad=True)
    return Transformer(cfg, params)


def encode_features(model: Transformer, feats, src_mask, drop=None) -> Tensor:
    return model.encode(feats, src_mask, drop)


def decode_logits(model: Transformer, memory, memory_mask, prev_tokens, drop=None) -> Tensor:
    return model.decode(memory, memory_mask, prev_tokens, drop)


# ----------------------------------------------------------------- checkpoint

def _write_blobs(buf, arrays: dict[str, np.ndarray]):
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def _read_blobs(buf) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, n).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(_read_exact(buf, 4 * size), dtype="<f4").reshape(shape)
        out[name] = arr.astype(np.float32)
    return out


def save_checkpoint(path, model: Transformer, train_state: dict | None = None) -> None:
    """Write model weights and, optionally, optimizer moments plus a small metadata dict.

    ``train_state`` holds ``step`` and ``m``/``v`` dicts keyed by parameter name;
    other scalar entries are stored in the metadata block.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_text = model.cfg.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    _write_blobs(buf, {k: v.data for k, v in model.params.items()})
    if train_state is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        meta = {k: v for k, v in train_state.items() if k not in ("m", "v")}
        meta_text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
        buf.write(struct.pack("<I", len(meta_text)))
        buf.write(meta_text)
        moments = {f"m.{k}": v for k, v in train_state.get("m", {}).items()}
        moments.update({f"v.{k}": v for k, v in train_state.get("v", {}).items()})
        _write_blobs(buf, moments)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, dtype=np.float32) -> tuple[Transformer, dict | None]:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an SLTM checkpoint")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    cfg = ModelConfig.from_text(_read_exact(buf, n).decode("utf-8"))
    arrays = _read_blobs(buf)
    expected = _param_shapes(cfg)
    if set(arrays) != set(expected):
        raise CheckpointError("parameter names do not match the stored config")
    params = {k: Tensor(arrays[k].astype(dtype), requires_grad=True) for k in expected}
    model = Transformer(cfg, params)
    flag = buf.read(1)
    if flag != b"\x01":
        return model, None
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    state: dict = {}
    for line in _read_exact(buf, n).decode("utf-8").splitlines():
        k, v = line.split("=", 1)
        state[k] = _parse_scalar(v)
    moments = _read_blobs(buf)
    state["m"] = {k[2:]: v for k, v in moments.items() if k.startswith("m.")}
    state["v"] = {k[2:]: v for k, v in moments.items() if k.startswith("v.")}
    return model, state


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v
