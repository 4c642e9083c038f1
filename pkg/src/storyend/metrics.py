"""Reference implementations of the generation metrics: BLEU@1-4,
ROUGE-L, CIDEr, a METEOR variant without synonym matching ("M-lite"),
and their sum (rSUM).

Scores are reported x100 where that is conventional. Deviations from the
third-party evaluation stacks are documented per function; matching them
bit-for-bit is a non-goal.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import ContractError

METRIC_ORDER = ("B@1", "B@2", "B@3", "B@4", "M", "R-L", "C")


@dataclass
class EvalPair:
    """One hypothesis with its (non-empty) reference set, as token lists."""

    hypothesis: list
    references: list

    def __post_init__(self):
        if not self.references:
            raise ContractError("EvalPair needs at least one reference")
        self.hypothesis = [t.lower() for t in self.hypothesis]
        self.references = [[t.lower() for t in ref] for ref in self.references]


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


_BLEU_EPS = 1e-9


def bleu(pairs, n):
    """Corpus-level BLEU@n: geometric mean of modified precisions up to n
    with a brevity penalty. Zero precisions are smoothed with a 1e-9
    epsilon so the geometric mean stays defined."""
    if not pairs:
        raise ContractError("bleu needs a non-empty corpus")
    if not 1 <= n <= 4:
        raise ContractError(f"bleu order must be 1..4, got {n}")
    matched = [0] * n
    total = [0] * n
    hyp_len = 0
    ref_len = 0
    for pair in pairs:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in pair.references)[1]
        for k in range(1, n + 1):
            counts = _ngrams(hyp, k)
            best = Counter()
            for ref in pair.references:
                ref_counts = _ngrams(ref, k)
                for gram, c in ref_counts.items():
                    best[gram] = max(best[gram], c)
            matched[k - 1] += sum(min(c, best[gram]) for gram, c in counts.items())
            total[k - 1] += max(0, len(hyp) - k + 1)
    log_sum = 0.0
    for k in range(n):
        precision = matched[k] / total[k] if total[k] else 0.0
        log_sum += math.log(max(precision, _BLEU_EPS))
    geo = math.exp(log_sum / n)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * geo


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


ROUGE_BETA_SQ = 1.2


def rouge_l(pair):
    """LCS F-measure with beta^2 = 1.2, maximized over references."""
    if not pair.hypothesis:
        raise ContractError("rouge_l needs a non-empty hypothesis")
    best = 0.0
    for ref in pair.references:
        lcs = _lcs_length(pair.hypothesis, ref)
        if lcs == 0:
            continue
        p = lcs / len(pair.hypothesis)
        r = lcs / len(ref)
        f = (1 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
        best = max(best, f)
    return 100.0 * best


def cider(pairs):
    """Base CIDEr (not CIDEr-D): TF-IDF n-gram cosine similarity for
    n = 1..4, averaged over n and references, scaled by 10.

    Document frequencies come from the reference corpus; there is no
    length penalty in this base form.
    """
    if len(pairs) < 2:
        raise ContractError("cider needs a corpus of at least 2 items")
    doc_freq = [Counter() for _ in range(4)]
    for pair in pairs:
        for k in range(4):
            grams = set()
            for ref in pair.references:
                grams.update(_ngrams(ref, k + 1))
            doc_freq[k].update(grams)
    n_docs = len(pairs)

    def tfidf(tokens, k):
        counts = _ngrams(tokens, k + 1)
        return {
            gram: c * math.log(n_docs / max(1.0, doc_freq[k][gram]))
            for gram, c in counts.items()
        }

    def cosine(u, v):
        dot = sum(u[g] * v[g] for g in u.keys() & v.keys())
        nu = math.sqrt(sum(x * x for x in u.values()))
        nv = math.sqrt(sum(x * x for x in v.values()))
        return dot / (nu * nv) if nu > 0 and nv > 0 else 0.0

    score = 0.0
    for pair in pairs:
        per_n = 0.0
        for k in range(4):
            hyp_vec = tfidf(pair.hypothesis, k)
            per_n += sum(
                cosine(hyp_vec, tfidf(ref, k)) for ref in pair.references
            ) / len(pair.references)
        score += per_n / 4.0
    return 10.0 * score / n_docs


_STEM_SUFFIXES = ("ing", "ed", "es", "s", "ly")


def _stem(token):
    for suffix in _STEM_SUFFIXES:
        if token.endswith(suffix) and len(token) > len(suffix) + 2:
            return token[: -len(suffix)]
    return token


def _align(hyp, ref):
    """Unigram alignment on exact then stem matches; returns (hyp_pos,
    ref_pos) pairs. In-order matching keeps chunks minimal for the
    monotone case."""
    matches = []
    used = [False] * len(ref)
    for stage in ("exact", "stem"):
        for i, tok in enumerate(hyp):
            if any(m[0] == i for m in matches):
                continue
            key = tok if stage == "exact" else _stem(tok)
            for j, rtok in enumerate(ref):
                if used[j]:
                    continue
                target = rtok if stage == "exact" else _stem(rtok)
                if key == target:
                    matches.append((i, j))
                    used[j] = True
                    break
    return sorted(matches)


METEOR_RECALL_WEIGHT = 9.0
METEOR_PENALTY_WEIGHT = 0.5
METEOR_PENALTY_POWER = 3.0


def meteor_lite(pair):
    """METEOR on exact + stem unigram matches, without WordNet synonymy.

    F_mean weights recall 9:1; the fragmentation penalty is
    0.5 * (chunks / matches)^3. Maximized over references.
    """
    if not pair.hypothesis:
        return 0.0
    best = 0.0
    for ref in pair.references:
        matches = _align(pair.hypothesis, ref)
        m = len(matches)
        if m == 0:
            continue
        p = m / len(pair.hypothesis)
        r = m / len(ref)
        f_mean = p * r * (1 + METEOR_RECALL_WEIGHT) / (r + METEOR_RECALL_WEIGHT * p)
        chunks = 1
        for (i0, j0), (i1, j1) in zip(matches, matches[1:]):
            if i1 != i0 + 1 or j1 != j0 + 1:
                chunks += 1
        penalty = METEOR_PENALTY_WEIGHT * (chunks / m) ** METEOR_PENALTY_POWER
        best = max(best, f_mean * (1.0 - penalty))
    return 100.0 * best


def rsum(scores):
    """Sum of the seven component scores (B@1..4, M, R-L, C)."""
    missing = [k for k in METRIC_ORDER if k not in scores]
    if missing:
        raise ContractError(f"rsum missing component(s): {', '.join(missing)}")
    return sum(scores[k] for k in METRIC_ORDER)


def evaluate_corpus(pairs):
    """All seven scores plus rSUM for a corpus of EvalPairs."""
    scores = {f"B@{n}": bleu(pairs, n) for n in range(1, 5)}
    scores["M"] = sum(meteor_lite(p) for p in pairs) / len(pairs)
    scores["R-L"] = sum(rouge_l(p) for p in pairs) / len(pairs)
    scores["C"] = cider(pairs)
    scores["rSUM"] = rsum(scores)
    return scores


def format_table(scores, label="storyend"):
    """Plain-text table in the conventional column order. The METEOR
    column is the synonym-free variant (M-lite)."""
    headers = ["Method"] + list(METRIC_ORDER) + ["rSUM"]
    row = [label] + [f"{scores[k]:.2f}" for k in METRIC_ORDER] + [f"{scores['rSUM']:.2f}"]
    widths = [max(len(h), len(v)) for h, v in zip(headers, row)]
    sep = "  "
    lines = [
        sep.join(h.ljust(w) for h, w in zip(headers, widths)),
        sep.join("-" * w for w in widths),
        sep.join(v.ljust(w) for v, w in zip(row, widths)),
    ]
    return "\n".join(lines)
