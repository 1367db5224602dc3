"""Caption and QA evaluation: corpus BLEU, ROUGE-1/L, exact-match METEOR,
CIDEr, 2-way identification, and plain answer accuracy.

Conventions fixed here (several standards leave them open): BLEU at order k
is the cumulative geometric mean over orders 1..k with the closest-reference
brevity penalty, ties going to the shorter reference; ROUGE is reported as
F1, best over references; METEOR uses exact surface matches only, alpha 0.9,
gamma 0.5, beta 3, with a chunk-minimizing alignment; CIDEr is the plain
TF-IDF cosine variant (no clipping, no length penalty) scaled by 10, with
IDF taken over the reference corpus.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ParameterError, ShapeError
from .textgen import word_split

METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_BETA = 3.0
CIDER_MAX_N = 4


@dataclass(frozen=True)
class EvalRecord:
    candidate: str
    references: tuple

    def __post_init__(self):
        refs = tuple(str(r) for r in self.references)
        if not refs:
            raise ParameterError("need at least one reference")
        object.__setattr__(self, "candidate", str(self.candidate))
        object.__setattr__(self, "references", refs)

    def candidate_words(self) -> list:
        return word_split(self.candidate)

    def reference_words(self) -> list:
        return [word_split(r) for r in self.references]


def _ngrams(words, n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _closest_ref_len(c_len: int, ref_lens) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c_len), r))


def bleu_counts(records, max_n: int = 4) -> dict:
    """Pooled corpus counts: per-order clipped matches and totals, summed
    candidate/closest-reference lengths, and indices of empty candidates
    (they contribute zero counts but still pull in a reference length)."""
    if not 1 <= max_n <= 4:
        raise ParameterError(f"max_n must be in [1, 4], got {max_n}")
    matched = [0] * max_n
    total = [0] * max_n
    c_sum = r_sum = 0
    empty = []
    for idx, rec in enumerate(records):
        c = rec.candidate_words()
        refs = rec.reference_words()
        r_sum += _closest_ref_len(len(c), [len(r) for r in refs])
        if not c:
            empty.append(idx)
            continue
        c_sum += len(c)
        for n in range(1, max_n + 1):
            cand = _ngrams(c, n)
            if not cand:
                continue
            ceiling = Counter()
            for r in refs:
                ceiling |= _ngrams(r, n)
            matched[n - 1] += sum(min(v, ceiling[g]) for g, v in cand.items())
            total[n - 1] += sum(cand.values())
    return {"matched": matched, "total": total, "candidate_len": c_sum,
            "reference_len": r_sum, "empty_candidates": empty}


def bleu(records, max_n: int = 4) -> dict:
    """Corpus scores {"B@1": ..} up to max_n."""
    counts = bleu_counts(records, max_n)
    c_sum, r_sum = counts["candidate_len"], counts["reference_len"]
    if c_sum == 0:
        return {f"B@{k}": 0.0 for k in range(1, max_n + 1)}
    bp = 1.0 if c_sum >= r_sum else float(np.exp(1.0 - r_sum / c_sum))
    out = {}
    for k in range(1, max_n + 1):
        precisions = [
            counts["matched"][n] / counts["total"][n] if counts["total"][n] else 0.0
            for n in range(k)
        ]
        if min(precisions) == 0.0:
            out[f"B@{k}"] = 0.0
        else:
            out[f"B@{k}"] = bp * float(np.exp(np.mean(np.log(precisions))))
    return out


# ---------------------------------------------------------------------------
# ROUGE
# ---------------------------------------------------------------------------


def _lcs_len(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _sample_rouge_1(c, refs) -> float:
    if not c:
        return 0.0
    best = 0.0
    cc = Counter(c)
    for r in refs:
        if not r:
            continue
        overlap = sum((cc & Counter(r)).values())
        best = max(best, _f1(overlap / len(c), overlap / len(r)))
    return best


def _sample_rouge_l(c, refs) -> float:
    if not c:
        return 0.0
    best = 0.0
    for r in refs:
        if not r:
            continue
        lcs = _lcs_len(c, r)
        best = max(best, _f1(lcs / len(c), lcs / len(r)))
    return best


def rouge_1(records) -> float:
    per = [_sample_rouge_1(r.candidate_words(), r.reference_words())
           for r in records]
    return float(np.mean(per)) if per else 0.0


def rouge_l(records) -> float:
    per = [_sample_rouge_l(r.candidate_words(), r.reference_words())
           for r in records]
    return float(np.mean(per)) if per else 0.0


# ---------------------------------------------------------------------------
# METEOR
# ---------------------------------------------------------------------------


def _best_alignment(c, r) -> tuple:
    """(matches, chunks) of a maximum exact-match alignment with the fewest
    chunks. A chunk extends exactly when adjacent candidate tokens map to
    adjacent reference tokens."""
    ref_pos = {}
    for j, w in enumerate(r):
        ref_pos.setdefault(w, []).append(j)
    n_c = len(c)

    @lru_cache(maxsize=None)
    def go(ci: int, prev_r: int, mask: int) -> tuple:
        if ci == n_c:
            return (0, 0)
        skip = go(ci + 1, -2, mask)
        best = skip
        for j in ref_pos.get(c[ci], ()):
            if mask & (1 << j):
                continue
            m, ch = go(ci + 1, j, mask | (1 << j))
            cand = (m + 1, ch + (0 if prev_r == j - 1 else 1))
            if cand[0] > best[0] or (cand[0] == best[0] and cand[1] < best[1]):
                best = cand
        return best

    result = go(0, -2, 0)
    go.cache_clear()
    return result


def _sample_meteor(c, refs) -> float:
    best = 0.0
    for r in refs:
        if not c or not r:
            continue
        m, chunks = _best_alignment(c, r)
        if m == 0:
            continue
        precision, recall = m / len(c), m / len(r)
        f_mean = precision * recall / (METEOR_ALPHA * precision
                                       + (1.0 - METEOR_ALPHA) * recall)
        penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA
        best = max(best, f_mean * (1.0 - penalty))
    return best


def meteor(records) -> float:
    per = [_sample_meteor(r.candidate_words(), r.reference_words())
           for r in records]
    return float(np.mean(per)) if per else 0.0


# ---------------------------------------------------------------------------
# CIDEr
# ---------------------------------------------------------------------------


def _idf_tables(records) -> list:
    """Per order n: n-gram -> document frequency over the reference corpus
    (a record counts once no matter how many of its references hit)."""
    tables = []
    for n in range(1, CIDER_MAX_N + 1):
        df = Counter()
        for rec in records:
            seen = set()
            for r in rec.reference_words():
                seen.update(_ngrams(r, n))
            df.update(seen)
        tables.append(df)
    return tables


def cider_per_sample(records) -> list:
    """Per-record CIDEr: TF-IDF cosine per order, averaged over references
    and orders, scaled by 10. N-grams never seen in the reference corpus get
    the maximum IDF, ln(corpus size)."""
    records = list(records)
    if len(records) < 2:
        raise ParameterError("CIDEr needs a corpus of >= 2 records")
    n_docs = len(records)
    tables = _idf_tables(records)

    def vec(words, n):
        df = tables[n - 1]
        return {g: cnt * (np.log(n_docs / df[g]) if df[g] else np.log(n_docs))
                for g, cnt in _ngrams(words, n).items()}

    def cosine(u, v):
        nu = np.sqrt(sum(x * x for x in u.values()))
        nv = np.sqrt(sum(x * x for x in v.values()))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        dot = sum(x * v[g] for g, x in u.items() if g in v)
        return dot / (nu * nv)

    scores = []
    for rec in records:
        c = rec.candidate_words()
        refs = rec.reference_words()
        per_n = []
        for n in range(1, CIDER_MAX_N + 1):
            cv = vec(c, n)
            per_n.append(float(np.mean([cosine(cv, vec(r, n)) for r in refs])))
        scores.append(10.0 * float(np.mean(per_n)))
    return scores


def cider(records) -> float:
    return float(np.mean(cider_per_sample(records)))


# ---------------------------------------------------------------------------
# identification and QA
# ---------------------------------------------------------------------------


def two_way_identification(fmri_embs, text_embs, seed=0,
                           all_pairs: bool = False) -> float:
    """For each fMRI embedding, is it closer (cosine) to its own caption
    embedding than to a distractor's? Ties count as failures. Returns a
    percentage. One seeded distractor per sample by default; all_pairs
    scores every ordered pair for a variance-free number."""
    f = np.asarray(fmri_embs, dtype=np.float64)
    t = np.asarray(text_embs, dtype=np.float64)
    if f.ndim != 2 or f.shape != t.shape:
        raise ShapeError(f"need matching [N, E] arrays, got {f.shape} and {t.shape}")
    n = f.shape[0]
    if n < 2:
        raise ParameterError(f"need at least 2 pairs, got {n}")
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    t = t / np.linalg.norm(t, axis=1, keepdims=True)
    sims = f @ t.T
    if all_pairs:
        own = np.diag(sims)[:, None]
        wins = (own > sims).sum(axis=1)  # diagonal never beats itself
        return float(100.0 * wins.sum() / (n * (n - 1)))
    rng = np.random.default_rng(seed)
    wins = 0
    for i in range(n):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        wins += sims[i, i] > sims[i, j]
    return float(100.0 * wins / n)


def vqa_accuracy(predictions, gold) -> float:
    """Exact class-match fraction in [0, 1]."""
    predictions, gold = list(predictions), list(gold)
    if len(predictions) != len(gold):
        raise ShapeError(f"{len(predictions)} predictions for {len(gold)} answers")
    if not gold:
        raise ParameterError("empty evaluation")
    return sum(p == g for p, g in zip(predictions, gold)) / len(gold)


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("B@1", "B@2", "B@3", "B@4", "R-1", "R-L", "M", "CIDEr", "CLIP")


@dataclass
class MetricReport:
    corpus: dict
    per_sample: dict = field(repr=False)
    config: dict = field(default_factory=dict)


def evaluate(records, max_n: int = 4) -> MetricReport:
    """All caption metrics over one corpus. The CLIP-style identification
    column needs embeddings, so callers merge it in separately."""
    records = list(records)
    if not records:
        raise ParameterError("no records to evaluate")
    corpus = dict(bleu(records, max_n))
    corpus["R-1"] = rouge_1(records)
    corpus["R-L"] = rouge_l(records)
    corpus["M"] = meteor(records)
    corpus["CIDEr"] = cider(records) if len(records) >= 2 else None
    per_sample = {
        "R-1": [_sample_rouge_1(r.candidate_words(), r.reference_words())
                for r in records],
        "R-L": [_sample_rouge_l(r.candidate_words(), r.reference_words())
                for r in records],
        "M": [_sample_meteor(r.candidate_words(), r.reference_words())
              for r in records],
    }
    if len(records) >= 2:
        per_sample["CIDEr"] = cider_per_sample(records)
    counts = bleu_counts(records, max_n)
    return MetricReport(
        corpus=corpus, per_sample=per_sample,
        config={"max_n": max_n, "n_records": len(records),
                "empty_candidates": counts["empty_candidates"]})


def _table_header() -> str:
    return f"{'':<14}" + "".join(f"{c:>9}" for c in REPORT_COLUMNS)


def _table_line(scores: dict, label: str) -> str:
    cells = []
    for c in REPORT_COLUMNS:
        v = scores.get(c)
        if v is None:
            cells.append(f"{'-':>9}")
        elif c == "CLIP":
            cells.append(f"{v:>9.1f}")
        else:
            cells.append(f"{v:>9.4f}")
    return f"{label:<14}" + "".join(cells)


def format_metric_row(scores: dict, label: str = "run") -> str:
    """Fixed-width two-line table over the standard column set; missing
    entries print as '-'."""
    return _table_header() + "\n" + _table_line(scores, label)


def format_metric_table(rows) -> str:
    """One header plus one line per (label, scores) pair."""
    return "\n".join([_table_header()]
                     + [_table_line(s, l) for l, s in rows])
