"""Text preprocessing and postprocessing.

Lowercasing, a deterministic BPE subword tokenizer using the ``▁`` word
boundary marker, detokenization and a frequency-table truecaser.
"""
from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

MARKER = "\u2581"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
_MAGIC = "SLTBPE 1"


class CorpusTooSmall(ValueError):
    pass


class UnknownId(IndexError):
    pass


class TokenizerFormatError(ValueError):
    pass


def lowercase(text: str) -> str:
    return text.lower()


@dataclass(frozen=True)
class TokenizerModel:
    vocab: tuple[str, ...]
    merges: tuple[tuple[str, str], ...]
    pad_id: int = PAD_ID
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    unk_id: int = UNK_ID
    _index: dict = field(default=None, init=False, repr=False, compare=False)
    _ranks: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.vocab)})
        object.__setattr__(self, "_ranks", {p: r for r, p in enumerate(self.merges)})
        if len(self._index) != len(self.vocab):
            raise TokenizerFormatError("duplicate vocabulary entries")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def id_of(self, piece: str) -> int:
        return self._index.get(piece, self.unk_id)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        lines = [_MAGIC, str(self.vocab_size)]
        lines += [_escape(v) for v in self.vocab]
        lines.append("MERGES")
        lines += [f"{_escape(a)}\t{_escape(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def loads(cls, text: str) -> "TokenizerModel":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 3 or lines[0] != _MAGIC:
            raise TokenizerFormatError("not an SLTBPE tokenizer file")
        n = int(lines[1])
        vocab = tuple(_unescape(v) for v in lines[2:2 + n])
        if len(vocab) != n or lines[2 + n] != "MERGES":
            raise TokenizerFormatError("vocabulary section truncated")
        merges = []
        for line in lines[3 + n:]:
            a, b = line.split("\t")
            merges.append((_unescape(a), _unescape(b)))
        return cls(vocab=vocab, merges=tuple(merges))


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(s: str) -> str:
    out = []
    it = iter(s)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


def _word_symbols(word: str) -> list[str]:
    return [MARKER] + list(word)


def train_tokenizer(corpus: list[str], vocab_size: int) -> TokenizerModel:
    """Learn BPE merges until the vocabulary has exactly ``vocab_size`` entries.

    The most frequent adjacent pair is merged first; ties go to the
    lexicographically smallest ``(left, right)``. Raises ``CorpusTooSmall``
    when the base alphabet does not fit or the corpus runs out of pairs.
    """
    word_freq = Counter(w for line in corpus for w in line.split())
    words = [_word_symbols(w) for w in sorted(word_freq)]
    freqs = [word_freq[w] for w in sorted(word_freq)]
    alphabet = sorted({s for syms in words for s in syms})
    n_base = len(SPECIALS) + len(alphabet)
    if n_base > vocab_size:
        raise CorpusTooSmall(
            f"vocab_size={vocab_size} is smaller than {len(SPECIALS)} specials "
            f"+ {len(alphabet)} base symbols")

    pair_counts: dict[tuple[str, str], int] = defaultdict(int)
    pair_words: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[wi]
            pair_words[pair].add(wi)
    heap = [(-c, a, b) for (a, b), c in pair_counts.items()]
    heapq.heapify(heap)

    vocab = list(SPECIALS) + alphabet
    seen = set(vocab)
    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_size:
        best = None
        while heap:
            neg, a, b = heapq.heappop(heap)
            if pair_counts.get((a, b), 0) == -neg and -neg > 0:
                best = (a, b)
                break
        if best is None:
            raise CorpusTooSmall(
                f"corpus supports at most {len(vocab)} vocabulary entries, "
                f"requested {vocab_size}")
        merged = best[0] + best[1]
        merges.append(best)
        if merged not in seen:
            seen.add(merged)
            vocab.append(merged)
        touched: dict[tuple[str, str], int] = {}
        for wi in sorted(pair_words.pop(best)):
            syms = words[wi]
            f = freqs[wi]
            for pair in zip(syms, syms[1:]):
                pair_counts[pair] -= f
                touched[pair] = pair_counts[pair]
            new = _apply_merge(syms, best, merged)
            words[wi] = new
            for pair in zip(new, new[1:]):
                pair_counts[pair] += f
                pair_words[pair].add(wi)
                touched[pair] = pair_counts[pair]
        pair_counts.pop(best, None)
        for pair, c in touched.items():
            if c > 0 and pair != best:
                heapq.heappush(heap, (-c, pair[0], pair[1]))
    return TokenizerModel(vocab=tuple(vocab), merges=tuple(merges))


def _apply_merge(syms: list[str], pair: tuple[str, str], merged: str) -> list[str]:
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i + 1 < n and syms[i] == pair[0] and syms[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def segment_word(model: TokenizerModel, word: str) -> list[str]:
    syms = _word_symbols(word)
    ranks = model._ranks
    while len(syms) > 1:
        best_rank, best = None, None
        for pair in zip(syms, syms[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best = r, pair
        if best is None:
            break
        syms = _apply_merge(syms, best, best[0] + best[1])
    return syms


def encode(model: TokenizerModel, text: str) -> list[int]:
    ids = []
    for word in text.split():
        ids.extend(model.id_of(s) for s in segment_word(model, word))
    return ids


def detokenize(model: TokenizerModel, ids) -> str:
    special = {model.pad_id, model.bos_id, model.eos_id, model.unk_id}
    pieces = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= model.vocab_size:
            raise UnknownId(f"token id {i} outside vocabulary of size {model.vocab_size}")
        if i in special:
            continue
        pieces.append(model.vocab[i])
    text = "".join(pieces).replace(MARKER, " ")
    return text[1:] if text.startswith(" ") else text


decode = detokenize


@dataclass
class CasingModel:
    casing_map: dict[str, tuple[str, int]]
    total_words: int = 0

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def dumps(self) -> str:
        return "".join(f"{k}\t{s}\t{c}\n" for k, (s, c) in self.casing_map.items())

    @classmethod
    def load(cls, path) -> "CasingModel":
        casing_map = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            low, surface, count = line.split("\t")
            casing_map[low] = (surface, int(count))
        return cls(casing_map, sum(c for _, c in casing_map.values()))


def train_truecaser(corpus: list[str]) -> CasingModel:
    """Tally surface forms per lowercase word.

    Sentence-initial tokens are recorded with their first character lowered
    and only serve as a fallback for words never seen elsewhere, so forms
    observed mid-sentence decide the casing. Ties go to the form seen first.
    """
    inner: dict[str, Counter] = defaultdict(Counter)
    initial: dict[str, Counter] = defaultdict(Counter)
    order: dict[str, int] = {}
    total = 0
    for line in corpus:
        for pos, tok in enumerate(line.split()):
            total += 1
            if pos == 0:
                tok = tok[:1].lower() + tok[1:]
                table = initial
            else:
                table = inner
            table[tok.lower()][tok] += 1
            order.setdefault(tok, len(order))
    casing_map = {}
    for low in sorted(set(inner) | set(initial), key=lambda w: min(
            order[s] for s in list(inner.get(w, ())) + list(initial.get(w, ())))):
        counts = inner.get(low) or initial[low]
        surface = min(counts, key=lambda s: (-counts[s], order[s]))
        casing_map[low] = (surface, counts[surface])
    return CasingModel(casing_map, total)


def truecase(model: CasingModel, text: str) -> str:
    toks = []
    for tok in text.split():
        entry = model.casing_map.get(tok)
        toks.append(entry[0] if entry else tok)
    out = " ".join(toks)
    for i, ch in enumerate(out):
        if ch.isalpha():
            return out[:i] + ch.upper() + out[i + 1:]
    return out


def postprocess(tokenizer: TokenizerModel, casing: CasingModel, ids) -> str:
    return truecase(casing, detokenize(tokenizer, ids))
