"""Corpus BLEU and reduced BLEU (rBLEU).

BLEU follows the usual corpus-level definition (clipped n-gram counts up to
order 4, brevity penalty, exponential smoothing of zero precisions). rBLEU
removes a blacklist of frequent function words from both sides first; at
sentence level a pair whose reduction leaves fewer than four words scores 0.
"""
from __future__ import annotations

import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

MAX_ORDER = 4
MIN_REDUCED_TOKENS = 4
REPORT_HEADER = ("split", "rBLEU", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU")


class LengthMismatch(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


_QUOTE_MAP = str.maketrans({
    "‘": "'", "’": "'", "‚": "'", "‛": "'", "′": "'",
    "“": '"', "”": '"', "„": '"', "‟": '"',
})
_SPLIT_RE = re.compile(r'([.,!?;:"()\[\]{}–—])')


def normalize_quotes(text: str) -> str:
    return text.translate(_QUOTE_MAP)


def bleu_tokenize(text: str) -> list[str]:
    return _SPLIT_RE.sub(r" \1 ", normalize_quotes(text)).split()


@dataclass(frozen=True)
class Blacklist:
    words: frozenset

    def __contains__(self, word: str) -> bool:
        return word in self.words

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_file(cls, path) -> "Blacklist":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def from_lines(cls, lines) -> "Blacklist":
        words = set()
        for line in lines:
            line = line.split("#", 1)[0].strip()
            if line:
                words.add(normalize_quotes(line.lower()))
        return cls(frozenset(words))

    @classmethod
    def default(cls) -> "Blacklist":
        text = resources.files("sltrans.resources").joinpath("appendix_a.txt").read_text(
            encoding="utf-8")
        return cls.from_lines(text.splitlines())


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def _strip_punct(text: str) -> str:
    out = []
    n = len(text)
    for i, ch in enumerate(text):
        if ch == "'" and 0 < i < n - 1 and text[i - 1].isalnum() and text[i + 1].isalnum():
            out.append(ch)
        elif _is_punct(ch):
            out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


def reduce(text: str, bl: Blacklist) -> list[str]:
    """Lowercase, drop punctuation (word-internal apostrophes survive) and blacklisted words."""
    clean = _strip_punct(normalize_quotes(text.lower()))
    return [t for t in clean.split() if t not in bl]


@dataclass
class BleuStats:
    """Sufficient statistics for corpus BLEU; additive over sentence pairs."""
    matches: list = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __iadd__(self, other: "BleuStats") -> "BleuStats":
        for n in range(MAX_ORDER):
            self.matches[n] += other.matches[n]
            self.totals[n] += other.totals[n]
        self.hyp_len += other.hyp_len
        self.ref_len += other.ref_len
        return self


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: list[str], ref: list[str]) -> BleuStats:
    st = BleuStats(hyp_len=len(hyp), ref_len=len(ref))
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        st.matches[n - 1] = sum(min(c, r[g]) for g, c in h.items())
        st.totals[n - 1] = max(len(hyp) - n + 1, 0)
    return st


@dataclass(frozen=True)
class BleuScore:
    score: float
    precisions: tuple
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: tuple = ()
    totals: tuple = ()


def smoothed_precisions(st: BleuStats) -> list[float]:
    """Precisions in [0, 1]; a zero match count becomes 1/(2^k * total) for the k-th zero seen."""
    out = []
    k = 0
    for m, t in zip(st.matches, st.totals):
        if t == 0:
            out.append(0.0)
        elif m == 0:
            k += 1
            out.append(1.0 / (2 ** k * t))
        else:
            out.append(m / t)
    return out


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len >= ref_len:
        return 1.0
    if hyp_len == 0:
        return 0.0
    return math.exp(1.0 - ref_len / hyp_len)


def score_from_stats(st: BleuStats, max_order: int = MAX_ORDER) -> BleuScore:
    prec = smoothed_precisions(st)
    bp = brevity_penalty(st.hyp_len, st.ref_len)
    used = prec[:max_order]
    if min(used) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in used) / max_order)
    raw = tuple(m / t if t else 0.0 for m, t in zip(st.matches, st.totals))
    return BleuScore(score, raw, bp, st.hyp_len, st.ref_len,
                     tuple(st.matches), tuple(st.totals))


def _check_pairs(hyps, refs):
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("no sentence pairs")


def corpus_stats_tokens(hyp_toks, ref_toks) -> BleuStats:
    _check_pairs(hyp_toks, ref_toks)
    total = BleuStats()
    for h, r in zip(hyp_toks, ref_toks):
        total += sentence_stats(h, r)
    return total


def corpus_bleu_tokens(hyp_toks, ref_toks) -> BleuScore:
    return score_from_stats(corpus_stats_tokens(hyp_toks, ref_toks))


def corpus_bleu(hyps: list[str], refs: list[str]) -> BleuScore:
    _check_pairs(hyps, refs)
    return corpus_bleu_tokens([bleu_tokenize(h) for h in hyps],
                              [bleu_tokenize(r) for r in refs])


def sentence_bleu(hyp: str, ref: str) -> float:
    return corpus_bleu([hyp], [ref]).score


def sentence_rbleu(hyp: str, ref: str, bl: Blacklist) -> float:
    h, r = reduce(hyp, bl), reduce(ref, bl)
    if min(len(h), len(r)) < MIN_REDUCED_TOKENS:
        return 0.0
    return corpus_bleu_tokens([h], [r]).score


def corpus_rbleu(hyps: list[str], refs: list[str], bl: Blacklist) -> float:
    _check_pairs(hyps, refs)
    return corpus_bleu_tokens([reduce(h, bl) for h in hyps],
                              [reduce(r, bl) for r in refs]).score


@dataclass
class MetricReport:
    bleu: BleuScore
    bleu1: float
    bleu2: float
    bleu3: float
    rbleu: float
    n_sentences: int

    def row(self) -> tuple[float, ...]:
        return (self.rbleu, self.bleu1, self.bleu2, self.bleu3, self.bleu.score)

    def as_dict(self) -> dict:
        return {"rbleu": self.rbleu, "bleu1": self.bleu1, "bleu2": self.bleu2,
                "bleu3": self.bleu3, "bleu": self.bleu.score,
                "brevity_penalty": self.bleu.brevity_penalty,
                "hyp_len": self.bleu.hyp_len, "ref_len": self.bleu.ref_len,
                "n_sentences": self.n_sentences}


def evaluate_report(hyps: list[str], refs: list[str], bl: Blacklist) -> MetricReport:
    _check_pairs(hyps, refs)
    st = corpus_stats_tokens([bleu_tokenize(h) for h in hyps],
                             [bleu_tokenize(r) for r in refs])
    return MetricReport(
        bleu=score_from_stats(st),
        bleu1=score_from_stats(st, 1).score,
        bleu2=score_from_stats(st, 2).score,
        bleu3=score_from_stats(st, 3).score,
        rbleu=corpus_rbleu(hyps, refs, bl),
        n_sentences=len(hyps),
    )


def format_report_tsv(rows: dict[str, tuple[float, ...]]) -> str:
    """``rows`` maps split name to (rBLEU, BLEU-1, BLEU-2, BLEU-3, BLEU)."""
    lines = ["\t".join(REPORT_HEADER)]
    for split, values in rows.items():
        lines.append("\t".join([split] + [f"{v:.2f}" for v in values]))
    return "\n".join(lines) + "\n"


def parse_report_tsv(text: str) -> dict[str, tuple[float, ...]]:
    lines = [l for l in text.splitlines() if l]
    if not lines or tuple(lines[0].split("\t")) != REPORT_HEADER:
        raise ValueError("unexpected report header")
    out = {}
    for line in lines[1:]:
        split, *vals = line.split("\t")
        out[split] = tuple(float(v) for v in vals)
    return out


def per_sentence_rows(ids, hyps, refs, bl: Blacklist) -> list[tuple[str, float, float]]:
    return [(i, sentence_bleu(h, r), sentence_rbleu(h, r, bl))
            for i, h, r in zip(ids, hyps, refs)]


def report_to_json(report: MetricReport) -> dict:
    d = report.as_dict()
    d["precisions"] = list(report.bleu.precisions)
    return d

