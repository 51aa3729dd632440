"""Greedy and length-normalized beam search over a trained Transformer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .textproc import BOS_ID, EOS_ID, PAD_ID

MAX_ROWS = 4096


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    normalized_score: float

    @property
    def content(self) -> tuple[int, ...]:
        """Tokens between bos and eos."""
        end = len(self.tokens) - 1 if self.tokens[-1] == EOS_ID else len(self.tokens)
        return self.tokens[1:end]


def normalized(log_prob: float, length: int, alpha: float) -> float:
    return log_prob / (length ** alpha) if alpha else log_prob


def next_token_logprobs(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the vocabulary with pad and bos excluded (float64)."""
    z = logits.astype(np.float64)
    z[..., PAD_ID] = -np.inf
    z[..., BOS_ID] = -np.inf
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def encode_inputs(model, feats_list, batch_size: int = 64):
    """Encode each input separately padded in mini-batches; yields (memory [T,d], mask [T])."""
    out = []
    with nx.no_grad():
        for s in range(0, len(feats_list), batch_size):
            chunk = feats_list[s:s + batch_size]
            t = max(f.shape[0] for f in chunk)
            src = np.zeros((len(chunk), t, chunk[0].shape[1]), dtype=model.dtype)
            mask = np.zeros((len(chunk), t), dtype=bool)
            for i, f in enumerate(chunk):
                src[i, :f.shape[0]] = f
                mask[i, :f.shape[0]] = True
            mem = model.encode(src, mask).data
            for i, f in enumerate(chunk):
                out.append((mem[i], mask[i]))
    return out


def _step_logprobs(model, encoded, row_src, prefixes):
    """Next-token log-probs for rows whose prefixes all have equal length."""
    res = []
    prefixes = np.asarray(prefixes, dtype=np.int64)
    t = max(encoded[i][0].shape[0] for i in set(row_src))
    with nx.no_grad():
        for s in range(0, len(row_src), MAX_ROWS):
            rows = row_src[s:s + MAX_ROWS]
            d = encoded[rows[0]][0].shape[1]
            mem = np.zeros((len(rows), t, d), dtype=model.dtype)
            mask = np.zeros((len(rows), t), dtype=bool)
            for j, i in enumerate(rows):
                m, mk = encoded[i]
                mem[j, :m.shape[0]] = m
                mask[j, :m.shape[0]] = mk
            logits = model.decode(Tensor(mem), mask, prefixes[s:s + MAX_ROWS]).data[:, -1]
            res.append(next_token_logprobs(logits))
    return np.concatenate(res, axis=0)


def _select(scores: np.ndarray, live, k: int):
    """Top-k (live index, token) pairs by score, ties by token sequence."""
    flat = scores.reshape(-1)
    finite = np.flatnonzero(np.isfinite(flat))
    if finite.size == 0:
        return []
    if finite.size > k:
        kth = np.partition(flat[finite], finite.size - k)[finite.size - k]
        finite = finite[flat[finite] >= kth]
    v = scores.shape[1]
    cands = [(-flat[c], live[c // v][0] + (int(c % v),), c // v) for c in finite]
    cands.sort(key=lambda c: (c[0], c[1]))
    return cands[:k]


def beam_search_batch(model, feats_list, beam: int = 5, max_len: int = 256,
                      alpha: float = 1.0, encoded=None) -> list[list[Hypothesis]]:
    """Beam search for several inputs in lockstep; returns ranked hypotheses per input.

    Every hypothesis ends in eos: after ``max_len`` content tokens only eos may
    follow. Search for an input stops once no live prefix can still beat the
    ``beam``-th best finished hypothesis.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if encoded is None:
        encoded = encode_inputs(model, feats_list)
    n = len(encoded)
    live = [[((BOS_ID,), 0.0)] for _ in range(n)]
    done: list[list[Hypothesis]] = [[] for _ in range(n)]
    max_total = max_len + 1
    for step in range(max_len + 1):
        row_src, prefixes = [], []
        for i in range(n):
            for toks, _ in live[i]:
                row_src.append(i)
                prefixes.append(toks)
        if not row_src:
            break
        lp = _step_logprobs(model, encoded, row_src, prefixes)
        if step == max_len:
            only_eos = np.full_like(lp, -np.inf)
            only_eos[:, EOS_ID] = lp[:, EOS_ID]
            lp = only_eos
        r = 0
        for i in range(n):
            cur = live[i]
            if not cur:
                continue
            block = lp[r:r + len(cur)] + np.array([s for _, s in cur])[:, None]
            r += len(cur)
            nxt = []
            for neg, toks, _ in _select(block, cur, beam):
                score = -neg
                if toks[-1] == EOS_ID:
                    done[i].append(Hypothesis(toks, score, normalized(score, len(toks) - 1, alpha)))
                else:
                    nxt.append((toks, score))
            if len(done[i]) >= beam and nxt:
                worst = sorted(h.normalized_score for h in done[i])[-beam]
                bound = max(normalized(s, max_total, alpha) for _, s in nxt)
                if bound <= worst:
                    nxt = []
            live[i] = nxt
    return [sorted(hs, key=lambda h: (-h.normalized_score, h.tokens))[:beam] for hs in done]


def beam_search(model, feats, beam: int = 5, max_len: int = 256, alpha: float = 1.0):
    return beam_search_batch(model, [np.asarray(feats)], beam, max_len, alpha)[0]


def greedy_batch(model, feats_list, max_len: int = 256, encoded=None) -> list[Hypothesis]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if encoded is None:
        encoded = encode_inputs(model, feats_list)
    n = len(encoded)
    seqs = [[BOS_ID] for _ in range(n)]
    scores = [0.0] * n
    active = list(range(n))
    for step in range(max_len + 1):
        if not active:
            break
        lp = _step_logprobs(model, encoded, active, [seqs[i] for i in active])
        still = []
        for row, i in enumerate(active):
            tok = EOS_ID if step == max_len else int(np.argmax(lp[row]))
            seqs[i].append(tok)
            scores[i] += float(lp[row, tok])
            if tok != EOS_ID:
                still.append(i)
        active = still
    return [Hypothesis(tuple(s), sc, sc) for s, sc in zip(seqs, scores)]


def greedy(model, feats, max_len: int = 256) -> Hypothesis:
    return greedy_batch(model, [np.asarray(feats)], max_len)[0]


def translate(model, feats_list, tokenizer, casing=None, beam: int = 5, max_len: int = 256,
              alpha: float = 1.0, chunk: int = 64) -> list[str]:
    """Decode, detokenize and truecase each input; one output sentence per input, in order."""
    from .textproc import detokenize, truecase

    out = []
    for s in range(0, len(feats_list), chunk):
        part = feats_list[s:s + chunk]
        for hyps in beam_search_batch(model, part, beam, max_len, alpha):
            text = detokenize(tokenizer, hyps[0].content)
            out.append(truecase(casing, text) if casing is not None else text)
    return out
