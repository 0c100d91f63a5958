"""Corpus BLEU, ROUGE-L, perplexity and exact-match attribute coverage."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EmptyCandidate, LengthMismatch
from .training import corpus_nll

# Yes/no values never appear verbatim in text, so this attribute is skipped.
COVERAGE_EXCLUDED = ("familyFriendly",)


def _check_inputs(candidates, reference_sets):
    if len(candidates) != len(reference_sets):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(reference_sets)} reference sets")
    for i, c in enumerate(candidates):
        if not c:
            raise EmptyCandidate(f"candidate {i} is empty")
    for i, refs in enumerate(reference_sets):
        if not refs or any(not r for r in refs):
            raise EmptyCandidate(f"reference set {i} is empty or holds an empty reference")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len, refs):
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu(candidates, reference_sets, max_n=4):
    """Corpus BLEU in [0, 100] without smoothing.

    Orders above the longest candidate's length are dropped from the
    geometric mean.
    """
    _check_inputs(candidates, reference_sets)
    order = min(max_n, max(len(c) for c in candidates))
    matches = [0] * order
    totals = [0] * order
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), refs)
        for n in range(1, order + 1):
            counts = _ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngrams(r, n).items():
                    max_ref[gram] = max(max_ref[gram], c)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / order
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a, b):
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidates, reference_sets):
    """Mean over candidates of the best LCS F1 against any reference, times 100."""
    _check_inputs(candidates, reference_sets)
    scores = []
    for cand, refs in zip(candidates, reference_sets):
        best = 0.0
        for ref in refs:
            lcs = lcs_length(cand, ref)
            if lcs:
                p, r = lcs / len(cand), lcs / len(ref)
                best = max(best, 2 * p * r / (p + r))
        scores.append(best)
    return 100.0 * float(np.mean(scores))


def perplexity(model, pairs, vocab, batch_size=64):
    """exp of the per-token NLL pooled over all ``(mr, reference)`` pairs."""
    if not pairs:
        raise ValueError("perplexity needs at least one sequence")
    total, tokens = corpus_nll(model, pairs, vocab, batch_size)
    return float(np.exp(total / tokens))


def _contains(tokens, value):
    k = len(value)
    return any(tuple(tokens[i : i + k]) == tuple(value) for i in range(len(tokens) - k + 1))


def attribute_coverage(mr, generated_tokens):
    """Which attributes of ``mr`` appear verbatim (as a contiguous run) in the text."""
    return {p.key: _contains(list(generated_tokens), p.value) for p in mr.pairs}


@dataclass
class CoverageSummary:
    generated: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)

    def add(self, mr, generated_tokens):
        for key, hit in attribute_coverage(mr, generated_tokens).items():
            self.expected[key] = self.expected.get(key, 0) + 1
            self.generated[key] = self.generated.get(key, 0) + int(hit)

    @property
    def overall(self):
        """Lower-bound share of covered attributes, or None if nothing is countable."""
        keys = [k for k in self.expected if k not in COVERAGE_EXCLUDED]
        denom = sum(self.expected[k] for k in keys)
        if denom == 0:
            return None
        return 100.0 * sum(self.generated[k] for k in keys) / denom

    def to_dict(self):
        return {
            "per_attribute": {
                k: {"generated": self.generated[k], "expected": self.expected[k]}
                for k in sorted(self.expected)
            },
            "excluded": [k for k in COVERAGE_EXCLUDED if k in self.expected],
            "overall_lower_bound": self.overall,
        }


def corpus_attribute_coverage(mrs, outputs):
    summary = CoverageSummary()
    for mr, out in zip(mrs, outputs):
        summary.add(mr, out)
    return summary


@dataclass
class MetricsReport:
    bleu: float
    rouge_l: float
    attribute_coverage: dict
    perplexity: float | None = None
    n_examples: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        rows = [("examples", str(self.n_examples)), ("BLEU", f"{self.bleu:.2f}"),
                ("ROUGE-L", f"{self.rouge_l:.2f}")]
        if self.perplexity is not None:
            rows.append(("perplexity", f"{self.perplexity:.3f}"))
        overall = self.attribute_coverage.get("overall_lower_bound")
        rows.append(("attribute coverage", "n/a" if overall is None else f"{overall:.1f}%"))
        for key, c in self.attribute_coverage.get("per_attribute", {}).items():
            note = " (excluded)" if key in COVERAGE_EXCLUDED else ""
            rows.append((f"  {key}", f"{c['generated']}/{c['expected']}{note}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def evaluate(examples, outputs, model=None, vocab=None):
    """Score tokenized ``outputs`` (one per example) against grouped references."""
    if len(outputs) != len(examples):
        raise LengthMismatch(f"{len(outputs)} outputs for {len(examples)} examples")
    refs = [list(ex.references) for ex in examples]
    ppl = None
    if model is not None:
        ppl = perplexity(model, [(ex.mr, r) for ex in examples for r in ex.references], vocab)
    cov = corpus_attribute_coverage([ex.mr for ex in examples], outputs)
    return MetricsReport(
        bleu=bleu(outputs, refs),
        rouge_l=rouge_l(outputs, refs),
        attribute_coverage=cov.to_dict(),
        perplexity=ppl,
        n_examples=len(examples),
    )
