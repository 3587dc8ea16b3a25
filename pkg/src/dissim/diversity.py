"""Output-space diversity metrics between trained classifiers.

Cohen's kappa here is the error-consistency reading: agreement in
*correctness* (both right or both wrong) against the agreement expected from
the two accuracies under independence. The raw both-wrong-overlap variant is
exposed separately for inspection. Degenerate cases (kappa with expected
agreement 1, EDR with no identical errors) are reported as None, never as a
number.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import softmax

SOFTMAX_TOL = 1e-5


@dataclass
class PredictionSet:
    softmax: np.ndarray   # N x classes rows summing to 1
    argmax: np.ndarray    # N int
    correct: np.ndarray   # N bool
    model_id: str

    def __post_init__(self):
        rowsum = self.softmax.sum(axis=1)
        if np.abs(rowsum - 1.0).max() > SOFTMAX_TOL:
            raise ValueError("softmax rows must sum to 1")
        if not np.array_equal(self.argmax, self.softmax.argmax(axis=1)):
            raise ValueError("argmax inconsistent with softmax")

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels: np.ndarray, model_id: str) -> "PredictionSet":
        probs = softmax(logits)
        arg = probs.argmax(axis=1)
        return cls(probs, arg, arg == np.asarray(labels), model_id)

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean())


def cohens_kappa(correct1, correct2) -> float | None:
    """Error-consistency kappa; None when expected agreement is exactly 1."""
    c1 = np.asarray(correct1, dtype=bool)
    c2 = np.asarray(correct2, dtype=bool)
    if c1.shape != c2.shape or c1.size == 0:
        raise ValueError("correctness vectors must be equal-length and non-empty")
    c_obs = float((c1 == c2).mean())
    p1, p2 = float(c1.mean()), float(c2.mean())
    c_exp = p1 * p2 + (1.0 - p1) * (1.0 - p2)
    if c_exp >= 1.0:
        return None
    return (c_obs - c_exp) / (1.0 - c_exp)


def cohens_kappa_error_overlap(correct1, correct2) -> float | None:
    """Raw both-wrong-overlap reading of the same normalization."""
    c1 = np.asarray(correct1, dtype=bool)
    c2 = np.asarray(correct2, dtype=bool)
    e_obs = float((~c1 & ~c2).mean())
    e_exp = (1.0 - c1.mean()) * (1.0 - c2.mean())
    if e_exp >= 1.0:
        return None
    return (e_obs - e_exp) / (1.0 - e_exp)


def jsd(P, Q) -> float:
    """Mean per-sample Jensen-Shannon divergence, base 2, in percent."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"softmax arrays differ in shape: {P.shape} vs {Q.shape}")
    for name, X in (("P", P), ("Q", Q)):
        if np.abs(X.sum(axis=1) - 1.0).max() > SOFTMAX_TOL:
            raise ValueError(f"{name} rows are not normalized distributions")
    M = 0.5 * (P + Q)

    def kl(A, B):
        ratio = np.divide(A, B, out=np.ones_like(A), where=A > 0)
        return (A * np.log2(ratio, out=np.zeros_like(A), where=ratio > 0)).sum(axis=1)

    per_sample = 0.5 * (kl(P, M) + kl(Q, M))
    return float(per_sample.mean()) * 100.0


def edr(pred1, pred2, truth) -> float | None:
    """Among joint errors, differing wrong labels over identical wrong labels."""
    p1 = np.asarray(pred1)
    p2 = np.asarray(pred2)
    y = np.asarray(truth)
    if not (p1.shape == p2.shape == y.shape):
        raise ValueError("prediction and truth vectors must be aligned")
    joint = (p1 != y) & (p2 != y)
    identical = int((p1[joint] == p2[joint]).sum())
    different = int(joint.sum()) - identical
    if identical == 0:
        return None
    return different / identical


def ensemble_accuracy(sets: list[PredictionSet], truth) -> float:
    """Accuracy of mean-softmax voting."""
    if not sets:
        raise ValueError("need at least one model")
    y = np.asarray(truth)
    n = len(y)
    if any(len(s.softmax) != n for s in sets):
        raise ValueError("prediction sets are misaligned with truth")
    # accumulate in a canonical order so exact ties round identically
    # regardless of the order the caller lists the models in
    stack = [s.softmax for s in sorted(sets, key=lambda s: s.model_id)]
    mean_probs = np.mean(np.asarray(stack, dtype=np.float64), axis=0)
    return float((mean_probs.argmax(axis=1) == y).mean())


@dataclass
class PairMetrics:
    model_a: str
    model_b: str
    kappa: float | None
    kappa_error_overlap: float | None
    jsd_percent: float
    edr: float | None


@dataclass
class DiversityReport:
    n_models: int
    model_ids: list[str]
    per_model_accuracy: dict[str, float]
    ensemble_accuracy: float
    pairs: list[PairMetrics]
    mean_kappa: float | None
    mean_jsd: float
    mean_edr: float | None
    degenerate_kappa_pairs: int
    undefined_edr_pairs: int
    metadata: dict = field(default_factory=lambda: {
        "ensemble_rule": "mean-softmax voting",
        "kappa_reading": "error consistency (agreement in correctness)",
        "jsd_log_base": 2,
    })


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def pairwise_report(sets: list[PredictionSet], truth) -> DiversityReport:
    if len(sets) < 2:
        raise ValueError("pairwise report needs at least 2 models")
    y = np.asarray(truth)
    pairs = []
    for a, b in itertools.combinations(sets, 2):
        pairs.append(PairMetrics(
            model_a=a.model_id,
            model_b=b.model_id,
            kappa=cohens_kappa(a.correct, b.correct),
            kappa_error_overlap=cohens_kappa_error_overlap(a.correct, b.correct),
            jsd_percent=jsd(a.softmax, b.softmax),
            edr=edr(a.argmax, b.argmax, y),
        ))
    return DiversityReport(
        n_models=len(sets),
        model_ids=[s.model_id for s in sets],
        per_model_accuracy={s.model_id: s.accuracy for s in sets},
        ensemble_accuracy=ensemble_accuracy(sets, y),
        pairs=pairs,
        mean_kappa=_mean_or_none(p.kappa for p in pairs),
        mean_jsd=float(np.mean([p.jsd_percent for p in pairs])),
        mean_edr=_mean_or_none(p.edr for p in pairs),
        degenerate_kappa_pairs=sum(p.kappa is None for p in pairs),
        undefined_edr_pairs=sum(p.edr is None for p in pairs),
    )
