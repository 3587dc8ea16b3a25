"""Differentiable similarity metrics between layer representations.

Aligned metrics (channel-wise Pearson correlation and regression R^2, both
CELU-bounded and averaged over channels) compare channel c of one
representation to channel c of another over the B*H*W samples of a batch.
The subspace metric (linear CKA on unbiased HSIC) treats the B batch items
as samples of flattened C*H*W-dimensional features and needs no alignment.

All loss-mode functions are pure tape ops: gradients flow into whichever
inputs are being trained. Evaluation-mode accumulation (lincka_dataset,
cka_heatmap) is plain numpy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VAR_EPS = 1e-8  # channels with sample variance below this are scored 0 and cut from gradients


class Metric(str, enum.Enum):
    L2CORR = "L2Corr"
    EXPVAR = "ExpVar"
    LINCKA = "LinCKA"

    @property
    def bounds(self) -> tuple[float, float]:
        if self is Metric.L2CORR:
            return (float(np.expm1(-1.0)), 1.0)
        if self is Metric.EXPVAR:
            return (-1.0, 1.0)
        return (0.0, 1.0)

    @classmethod
    def parse(cls, value) -> "Metric":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown metric {value!r}; choices: {[m.value for m in cls]}")


@dataclass
class Representation:
    """A B x C x H x W activation batch captured before a ReLU."""

    values: Tensor
    tap_id: int
    model_id: str


@dataclass(frozen=True)
class SimilarityScore:
    value: float
    metric: Metric

    @property
    def bounds(self) -> tuple[float, float]:
        return self.metric.bounds


class DegenerateRepresentationError(ValueError):
    """A representation collapsed to (near-)constant; CKA is undefined on it."""


def celu(x, alpha: float = 1.0) -> Tensor:
    """Bounding function applied to per-channel scores; see tensor.celu."""
    return T.celu(x, alpha)


def _values(z) -> Tensor:
    return z.values if isinstance(z, Representation) else T._as_tensor(z)


def _per_channel(z: Tensor) -> Tensor:
    """B x C x H x W -> C x (B*H*W)."""
    if z.ndim != 4:
        raise T.ShapeError(f"expected B x C x H x W representation, got {z.shape}")
    b, c, h, w = z.shape
    return T.reshape(T.transpose(z, (1, 0, 2, 3)), (c, b * h * w))


def _channel_mask(*flats: Tensor) -> np.ndarray:
    """1.0 for channels whose sample variance is >= VAR_EPS in every input."""
    mask = None
    for f in flats:
        var = f.data.var(axis=1)
        ok = var >= VAR_EPS
        mask = ok if mask is None else (mask & ok)
    return mask.astype(flats[0].dtype)


def _prep_pair(z, zhat):
    zv, hv = _values(z), _values(zhat)
    if zv.shape != hv.shape:
        raise T.ShapeError(f"representation shapes differ: {zv.shape} vs {hv.shape}")
    return _per_channel(zv), _per_channel(hv)


def l2corr(z, zhat) -> Tensor:
    """Mean over channels of CELU(Pearson r) between aligned channels."""
    zf, hf = _prep_pair(z, zhat)
    mask = _channel_mask(zf, hf)
    keep, drop = Tensor(mask), Tensor(1.0 - mask)
    zc = zf - T.tmean(zf, axis=1, keepdims=True)
    hc = hf - T.tmean(hf, axis=1, keepdims=True)
    cov = T.tsum(zc * hc, axis=1)
    vz = T.tsum(zc * zc, axis=1)
    vh = T.tsum(hc * hc, axis=1)
    # degenerate channels would divide by ~0; patch their denominator to 1,
    # the mask then zeroes both their score and their gradient
    denom = T.power(vz * keep + drop, 0.5) * T.power(vh * keep + drop, 0.5)
    r = (cov / denom) * keep
    return T.tmean(T.celu(r))


def expvar(z, zhat) -> Tensor:
    """Mean over channels of CELU(R^2) of predicting each channel of z by zhat."""
    zf, hf = _prep_pair(z, zhat)
    mask = _channel_mask(zf)  # only the target's variance can degenerate the score
    keep, drop = Tensor(mask), Tensor(1.0 - mask)
    zc = zf - T.tmean(zf, axis=1, keepdims=True)
    sse = T.tsum(T.power(zf - hf, 2.0), axis=1)
    sst = T.tsum(zc * zc, axis=1)
    r2 = keep - (sse / (sst * keep + drop)) * keep
    return T.tmean(T.celu(r2))


def hsic_unbiased(K, L) -> Tensor:
    """Unbiased HSIC estimator on symmetric kernel matrices (diagonals zeroed)."""
    K, L = T._as_tensor(K), T._as_tensor(L)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape != L.shape:
        raise T.ShapeError(f"kernel matrices must be square and same-shape: {K.shape}, {L.shape}")
    n = K.shape[0]
    if n < 4:
        raise ValueError(f"unbiased HSIC needs n >= 4, got n = {n}")
    off = Tensor((1.0 - np.eye(n)).astype(K.dtype.type))
    kt = K * off
    lt = L * off
    trace = T.tsum(kt * lt)  # == tr(K~ L~) for symmetric inputs
    s_all = T.tsum(kt) * T.tsum(lt) * float(1.0 / ((n - 1) * (n - 2)))
    rows = T.tsum(T.tsum(kt, axis=1) * T.tsum(lt, axis=1)) * float(2.0 / (n - 2))
    return (trace + s_all - rows) * float(1.0 / (n * (n - 3)))


def _flatten_examples(z: Tensor) -> Tensor:
    if z.ndim == 2:
        return z
    return T.reshape(z, (z.shape[0], -1))


def lincka_batch(X, Y) -> Tensor:
    """Single-batch linear CKA between n x p and n x q feature matrices."""
    X = _flatten_examples(_values(X))
    Y = _flatten_examples(_values(Y))
    if X.shape[0] != Y.shape[0]:
        raise T.ShapeError(f"example counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 4:
        raise ValueError(f"linear CKA needs n >= 4 examples, got {X.shape[0]}")
    K = T.matmul(X, T.transpose(X))
    L = T.matmul(Y, T.transpose(Y))
    hxy = hsic_unbiased(K, L)
    hxx = hsic_unbiased(K, K)
    hyy = hsic_unbiased(L, L)
    if hxx.item() <= 0 or hyy.item() <= 0:
        raise DegenerateRepresentationError(
            "HSIC(K,K) <= 0: a representation is constant or collapsed")
    return hxy / (T.power(hxx, 0.5) * T.power(hyy, 0.5))


def lincka_dataset(reps_x, reps_y) -> SimilarityScore:
    """Accumulated minibatch CKA over two aligned batch iterators (no gradients)."""
    sxy = sxx = syy = 0.0
    k = 0
    it_x, it_y = iter(reps_x), iter(reps_y)
    while True:
        bx = next(it_x, None)
        by = next(it_y, None)
        if bx is None and by is None:
            break
        if bx is None or by is None:
            raise ValueError("batch iterators ended at different lengths")
        xa = np.asarray(bx.values.data if isinstance(bx, Representation) else bx, dtype=np.float64)
        ya = np.asarray(by.values.data if isinstance(by, Representation) else by, dtype=np.float64)
        xa = xa.reshape(xa.shape[0], -1)
        ya = ya.reshape(ya.shape[0], -1)
        if xa.shape[0] != ya.shape[0]:
            raise ValueError(f"batch sizes differ: {xa.shape[0]} vs {ya.shape[0]}")
        K = xa @ xa.T
        L = ya @ ya.T
        sxy += _hsic_np(K, L)
        sxx += _hsic_np(K, K)
        syy += _hsic_np(L, L)
        k += 1
    if k == 0:
        raise ValueError("empty batch iterators")
    if sxx <= 0 or syy <= 0:
        raise DegenerateRepresentationError(
            "accumulated HSIC(K,K) <= 0: a representation is constant or collapsed")
    value = (sxy / k) / (np.sqrt(sxx / k) * np.sqrt(syy / k))
    return SimilarityScore(float(value), Metric.LINCKA)


def _hsic_np(K: np.ndarray, L: np.ndarray) -> float:
    n = K.shape[0]
    if n < 4:
        raise ValueError(f"unbiased HSIC needs n >= 4, got n = {n}")
    kt = K - np.diag(np.diag(K))
    lt = L - np.diag(np.diag(L))
    trace = float((kt * lt).sum())
    s_all = kt.sum() * lt.sum() / ((n - 1) * (n - 2))
    rows = 2.0 / (n - 2) * float(kt.sum(axis=1) @ lt.sum(axis=1))
    return (trace + s_all - rows) / (n * (n - 3))


def cka_heatmap(model_a, model_b, data, taps_a, taps_b) -> np.ndarray:
    """|taps_a| x |taps_b| matrix of dataset LinCKA between tap activations.

    ``data`` yields image batches (B x C x H x W arrays); both models see the
    same batches, so the accumulated per-batch HSIC sums stay aligned by
    construction.
    """
    taps_a, taps_b = list(taps_a), list(taps_b)
    sxy = np.zeros((len(taps_a), len(taps_b)))
    sxx = np.zeros(len(taps_a))
    syy = np.zeros(len(taps_b))
    k = 0
    for batch in data:
        x = Tensor(np.asarray(batch, dtype=np.float32))
        _, ra = model_a.forward_with_taps(x, taps_a, training=False)
        _, rb = model_b.forward_with_taps(x, taps_b, training=False)
        gram_a, gram_b = [], []
        for t in taps_a:
            f = np.asarray(ra[t].values.data, dtype=np.float64).reshape(x.shape[0], -1)
            gram_a.append(f @ f.T)
        for t in taps_b:
            f = np.asarray(rb[t].values.data, dtype=np.float64).reshape(x.shape[0], -1)
            gram_b.append(f @ f.T)
        for i, K in enumerate(gram_a):
            sxx[i] += _hsic_np(K, K)
            for j, L in enumerate(gram_b):
                sxy[i, j] += _hsic_np(K, L)
        for j, L in enumerate(gram_b):
            syy[j] += _hsic_np(L, L)
        k += 1
    if k == 0:
        raise ValueError("empty data iterator")
    if (sxx <= 0).any() or (syy <= 0).any():
        raise DegenerateRepresentationError("a tap's accumulated HSIC(K,K) <= 0")
    return (sxy / k) / np.sqrt(np.outer(sxx / k, syy / k))
