"""Feature files, manifests, padded batches and the synthetic parallel corpus.

SLTF feature file layout (little endian): ``b"SLTF"``, u32 version (1),
u32 T, u32 D, then T*D float32 values in row-major order.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import textproc

log = logging.getLogger(__name__)

SLTF_MAGIC = b"SLTF"
SLTF_VERSION = 1
MANIFEST_HEADER = ("id", "features", "n_frames", "translation")
BUCKET_CHUNKS = 20


class DataError(ValueError):
    pass


class BadHeader(DataError):
    pass


class DuplicateId(DataError):
    pass


class MissingFile(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class EmptyDataset(DataError):
    pass


# ------------------------------------------------------------------ features

def write_features(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError(f"features must be a non-empty T x D matrix, got {frames.shape}")
    t, d = frames.shape
    Path(path).write_bytes(struct.pack("<4sIII", SLTF_MAGIC, SLTF_VERSION, t, d)
                           + np.ascontiguousarray(frames).tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"feature file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16:
        raise TruncatedFile(f"{path}: shorter than the SLTF header")
    magic, version, t, d = struct.unpack("<4sIII", raw[:16])
    if magic != SLTF_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != SLTF_VERSION:
        raise DataError(f"{path}: unsupported SLTF version {version}")
    need = 16 + 4 * t * d
    if len(raw) < need:
        raise TruncatedFile(f"{path}: header says {t}x{d} but payload has {len(raw) - 16} bytes")
    frames = np.frombuffer(raw, dtype="<f4", count=t * d, offset=16).reshape(t, d)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteValue(f"{path}: non-finite feature values")
    return frames.astype(np.float32)


def read_features_header(path) -> tuple[int, int]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"feature file not found: {path}")
    with path.open("rb") as fh:
        head = fh.read(16)
    if len(head) < 16:
        raise TruncatedFile(f"{path}: shorter than the SLTF header")
    magic, _, t, d = struct.unpack("<4sIII", head)
    if magic != SLTF_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if path.stat().st_size < 16 + 4 * t * d:
        raise TruncatedFile(f"{path}: payload shorter than header claims")
    return t, d


def convert_text_matrix(src, dst) -> tuple[int, int]:
    """Convert a whitespace-separated text matrix (one frame per line) to SLTF."""
    frames = np.loadtxt(src, dtype=np.float64, ndmin=2)
    write_features(dst, frames)
    return frames.shape


# ------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    feature_path: str
    n_frames: int
    translation: str


def parse_manifest(path) -> list[ManifestRecord]:
    # only "\n" separates rows; translations may hold other line-break characters
    lines = [l[:-1] if l.endswith("\r") else l
             for l in Path(path).read_text(encoding="utf-8").split("\n")]
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise BadHeader(f"{path}: expected header {'<TAB>'.join(MANIFEST_HEADER)}")
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_HEADER):
            raise BadHeader(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} columns, got {len(cols)}")
        rid, feat, n, text = cols
        if rid in seen:
            raise DuplicateId(f"{path}:{lineno}: duplicate id {rid!r}")
        seen.add(rid)
        try:
            n_frames = int(n)
        except ValueError:
            raise BadHeader(f"{path}:{lineno}: n_frames is not an integer") from None
        records.append(ManifestRecord(rid, feat, n_frames, text))
    return records


def write_manifest(path, records) -> None:
    out = ["\t".join(MANIFEST_HEADER)]
    for r in records:
        for value in (r.id, r.feature_path, r.translation):
            if "\t" in value or "\n" in value or value.endswith("\r"):
                raise DataError(f"record {r.id!r}: tabs and newlines are not allowed in fields")
        out.append(f"{r.id}\t{r.feature_path}\t{r.n_frames}\t{r.translation}")
    Path(path).write_bytes(("\n".join(out) + "\n").encode("utf-8"))


def verify_manifest(path, records=None) -> int:
    """Check every feature header against the manifest; returns the feature dim."""
    records = parse_manifest(path) if records is None else records
    root = Path(path).parent
    dims = set()
    for r in records:
        t, d = read_features_header(root / r.feature_path)
        if t != r.n_frames:
            raise DataError(f"{r.id}: manifest says {r.n_frames} frames, file has {t}")
        dims.add(d)
    if len(dims) > 1:
        raise DataError(f"{path}: inconsistent feature dims {sorted(dims)}")
    return dims.pop() if dims else 0


# -------------------------------------------------------------------- batches

@dataclass
class Example:
    id: str
    features: np.ndarray
    tokens: list[int]
    translation: str


def load_examples(manifest_path, tokenizer: textproc.TokenizerModel | None = None,
                  max_frames: int | None = None) -> list[Example]:
    root = Path(manifest_path).parent
    out = []
    for r in parse_manifest(manifest_path):
        feats = read_features(root / r.feature_path)
        if feats.shape[0] != r.n_frames:
            raise DataError(f"{r.id}: manifest says {r.n_frames} frames, file has {feats.shape[0]}")
        if max_frames is not None and feats.shape[0] > max_frames:
            log.warning("%s: truncating %d frames to %d", r.id, feats.shape[0], max_frames)
            feats = feats[:max_frames]
        toks = textproc.encode(tokenizer, textproc.lowercase(r.translation)) if tokenizer else []
        out.append(Example(r.id, feats, toks, r.translation))
    return out


@dataclass
class Batch:
    ids: list[str]
    src: np.ndarray         # [B, T, D], zero padded
    src_mask: np.ndarray    # [B, T], True on real frames
    target: np.ndarray      # [B, U+2], bos ... eos then pad
    target_mask: np.ndarray  # [B, U+2], True on non-pad

    @property
    def prev_tokens(self) -> np.ndarray:
        return self.target[:, :-1]

    @property
    def gold(self) -> np.ndarray:
        return self.target[:, 1:]

    def __len__(self) -> int:
        return len(self.ids)


def collate(examples: list[Example], pad_id=textproc.PAD_ID, bos_id=textproc.BOS_ID,
            eos_id=textproc.EOS_ID, max_target: int | None = None) -> Batch:
    b = len(examples)
    t = max(e.features.shape[0] for e in examples)
    d = examples[0].features.shape[1]
    src = np.zeros((b, t, d), dtype=np.float32)
    src_mask = np.zeros((b, t), dtype=bool)
    seqs = []
    for i, e in enumerate(examples):
        n = e.features.shape[0]
        src[i, :n] = e.features
        src_mask[i, :n] = True
        toks = list(e.tokens)
        if max_target is not None:
            toks = toks[:max_target - 1]
        seqs.append([bos_id] + toks + [eos_id])
    u = max(len(s) for s in seqs)
    target = np.full((b, u), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        target[i, :len(s)] = s
    return Batch([e.id for e in examples], src, src_mask, target, target != pad_id)


def make_batches(examples: list[Example], batch_size: int, seed: int, epoch: int,
                 max_target: int | None = None) -> list[Batch]:
    """Shuffle (seeded per epoch), sort by source length inside chunks of
    ``batch_size * 20`` and cut into batches; only the final batch may be short."""
    if not examples:
        raise EmptyDataset("no examples to batch")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(examples))
    chunk = batch_size * BUCKET_CHUNKS
    sorted_idx = []
    for start in range(0, len(order), chunk):
        part = order[start:start + chunk]
        sorted_idx.extend(sorted(part, key=lambda i: examples[i].features.shape[0]))
    return [collate([examples[i] for i in sorted_idx[s:s + batch_size]], max_target=max_target)
            for s in range(0, len(sorted_idx), batch_size)]


# ------------------------------------------------------------------ synthetic

@dataclass
class SyntheticSpec:
    n_symbols: int = 40
    frames_per_symbol: int = 4
    feature_dim: int = 64
    noise_sigma: float = 0.1
    min_len: int = 3
    max_len: int = 8
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    seed: int = 1

    def validate(self) -> "SyntheticSpec":
        if min(self.n_symbols, self.frames_per_symbol, self.feature_dim, self.min_len,
               self.n_train, self.n_val, self.n_test) <= 0:
            raise DataError("synthetic spec sizes must be positive")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")
        if self.min_len > self.max_len:
            raise DataError("min_len must not exceed max_len")
        return self


def symbol_word(k: int) -> str:
    return f"w{k}"


def synthetic_sentence(symbols) -> str:
    """Words ``w<k>`` joined by spaces, sentence-cased like natural references."""
    text = " ".join(symbol_word(int(k)) for k in symbols)
    return text[:1].upper() + text[1:]


SPLITS = ("train", "valid", "test")


def generate_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, Path]:
    """Write prototypes, per-example SLTF files and one manifest per split."""
    spec.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    f, d = spec.frames_per_symbol, spec.feature_dim
    protos = rng.standard_normal((spec.n_symbols, f, d))
    write_features(out / "prototypes.sltf", protos.reshape(spec.n_symbols * f, d))
    manifests = {}
    for split, n in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        records = []
        for i in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            symbols = rng.integers(0, spec.n_symbols, size=length)
            frames = protos[symbols].reshape(length * f, d)
            frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
            rid = f"{split}-{i:06d}"
            rel = f"features/{rid}.sltf"
            write_features(out / rel, frames)
            records.append(ManifestRecord(rid, rel, length * f, synthetic_sentence(symbols)))
        manifests[split] = out / f"{split}.tsv"
        write_manifest(manifests[split], records)
    return manifests


def read_prototypes(out_dir, spec: SyntheticSpec) -> np.ndarray:
    flat = read_features(Path(out_dir) / "prototypes.sltf")
    return flat.reshape(spec.n_symbols, spec.frames_per_symbol, spec.feature_dim)
