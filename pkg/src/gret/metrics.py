"""Corpus BLEU, exact-match rate, and the metrics CSV row format."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

CSV_HEADER = "experiment,config_hash,step,metric,value,wall_clock_s"


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list, references: list, max_n: int = 4) -> float:
    """Corpus-level BLEU in [0, 100] with uniform n-gram weights up to max_n.

    Clipped precisions are pooled over the corpus.  A zero match count for
    an order >= 2 is floored at 1 / (2 * total) so short corpora still get
    a graded score; orders with no candidate n-grams at all (every
    hypothesis shorter than n) drop out of the mean; a zero unigram match
    means nothing matched at all and scores 0.  Brevity penalty is
    exp(1 - ref_len / hyp_len) when the hypotheses are shorter than the
    references.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu: empty corpus")
    if max_n < 1:
        raise ValueError(f"bleu: max_n must be >= 1, got {max_n}")

    matched = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            overlap = counts & _ngrams(ref, n)
            matched[n - 1] += sum(overlap.values())
            total[n - 1] += max(len(hyp) - n + 1, 0)

    if total[0] == 0 or matched[0] == 0:
        return 0.0
    log_precs = []
    for n in range(max_n):
        if total[n] == 0:
            continue
        p = matched[n] / total[n]
        if p == 0.0:
            p = 1.0 / (2.0 * total[n])
        log_precs.append(math.log(p))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(sum(log_precs) / len(log_precs))


def exact_match(hypotheses: list, references: list) -> float:
    """Fraction of hypotheses identical to their reference, in [0, 1]."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"exact_match: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("exact_match: empty corpus")
    hits = sum(list(h) == list(r) for h, r in zip(hypotheses, references))
    return hits / len(hypotheses)


@dataclass
class MetricRow:
    experiment: str
    config_hash: str
    step: int | str  # training step number or eval split name
    metric: str
    value: float
    wall_clock_s: float

    def as_csv(self) -> str:
        return (f"{self.experiment},{self.config_hash},{self.step},"
                f"{self.metric},{self.value:.6g},{self.wall_clock_s:.6g}")


def write_metrics(path, rows: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.as_csv() + "\n")


def read_metrics(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"metrics file {path}: unexpected header {header!r}")
        for line in fh:
            exp, cfg, step, metric, value, wall = line.strip().split(",")
            rows.append(MetricRow(exp, cfg, int(step) if step.isdigit() else step,
                                  metric, float(value), float(wall)))
    return rows
