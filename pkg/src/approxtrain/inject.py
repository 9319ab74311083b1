"""Calibrated error injection.

Type 1 models the error of the accurate kernel relative to the proxy output
as a value-dependent normal: both its mean and its standard deviation are
polynomials in the proxy output. Type 2 keeps a single mean and variance per
layer. Calibration runs the accurate kernel on one batch; the batches in
between only pay for the cheap kernel plus a keyed noise draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from .checkpointing import PointwiseFn
from .rng import gaussian_field

DEFAULT_DEGREE = 3
DEFAULT_BINS = 32
RIDGE = 1e-8


def polyfit(xs, ys, degree: int, ridge: float = RIDGE, weights=None) -> np.ndarray:
    """Least-squares polynomial, coefficients in ascending order.

    Solves the ridge-stabilised normal equations on ``x / max|x|`` and maps the
    coefficients back to the raw variable. Optional ``weights`` scale each
    squared residual.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise ValueError(f"xs and ys differ in length: {xs.size} vs {ys.size}")
    wts = np.ones_like(xs) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if wts.shape != xs.shape or (wts < 0).any():
        raise ValueError("weights must be non-negative and match xs")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if xs.size <= degree:
        raise ValueError(f"need more than {degree} points for a degree-{degree} fit, got {xs.size}")
    if degree > 0 and np.ptp(xs) == 0:
        raise ValueError("all xs are equal; the fit is degenerate")
    scale = float(np.abs(xs).max()) or 1.0
    t = xs / scale
    vander = t[:, None] ** np.arange(degree + 1)
    gram = vander.T @ (vander * wts[:, None]) + ridge * np.eye(degree + 1)
    coeffs = np.linalg.solve(gram, vander.T @ (wts * ys))
    return coeffs / scale ** np.arange(degree + 1)


def polyval(coeffs, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for c in reversed(np.asarray(coeffs, dtype=np.float64)):
        out = out * x + c
    return out


def polyder(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size <= 1:
        return np.zeros(1)
    return coeffs[1:] * np.arange(1, coeffs.size)


@dataclass
class ErrorModelType1:
    mean_poly: np.ndarray
    std_poly: np.ndarray
    lo: float
    hi: float
    calibrated_at: int = -1

    def _clamp(self, y):
        return np.clip(np.asarray(y, dtype=np.float64), self.lo, self.hi)

    def mean(self, y) -> np.ndarray:
        return polyval(self.mean_poly, self._clamp(y))

    def std(self, y) -> np.ndarray:
        return np.maximum(polyval(self.std_poly, self._clamp(y)), 0.0)


@dataclass
class ErrorModelType2:
    mean: float
    var: float
    calibrated_at: int = -1

    def __post_init__(self):
        if not self.var >= 0:
            raise ValueError(f"variance must be non-negative, got {self.var}")


@dataclass(frozen=True)
class InjectionKey:
    """Noise key minus the element index, which is the flat position in the tensor."""

    base_seed: int
    layer_id: int
    batch_index: int

    def normals(self, shape) -> np.ndarray:
        return gaussian_field(self.base_seed, self.layer_id, self.batch_index, shape)


def calibrate_type1(y_accurate, y_proxy, degree: int = DEFAULT_DEGREE, bins: int = DEFAULT_BINS,
                    batch_index: int = -1) -> ErrorModelType1:
    """Bin ``y_accurate - y_proxy`` by proxy value and fit per-bin mean and std.

    Each bin's fit weight is its share of the samples, so the fitted mean is
    the per-element least-squares fit restricted to bin-center abscissae and
    near-empty edge bins cannot dominate the curve.
    """
    acc = np.asarray(y_accurate, dtype=np.float64).reshape(-1)
    prox = np.asarray(y_proxy, dtype=np.float64).reshape(-1)
    if acc.shape != prox.shape or not acc.size:
        raise ValueError("accurate and proxy outputs must be non-empty and the same size")
    err = acc - prox
    lo, hi = float(prox.min()), float(prox.max())
    counters.bump("type1_calibrations")
    if hi > lo:
        idx = np.minimum(((prox - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
        count = np.bincount(idx, minlength=bins)
        total = np.bincount(idx, weights=err, minlength=bins)
        nonempty = count > 0
        means = total[nonempty] / count[nonempty]
        resid = err - (total / np.maximum(count, 1))[idx]
        stds = np.sqrt(np.bincount(idx, weights=resid * resid, minlength=bins)[nonempty] / count[nonempty])
        centers = (lo + (np.arange(bins) + 0.5) * (hi - lo) / bins)[nonempty]
        wts = count[nonempty] / acc.size
        used = int(nonempty.sum())
    else:
        used = 1
    if used < 2:
        return ErrorModelType1(np.array([err.mean()]), np.array([err.std()]), lo, hi, batch_index)
    deg = min(degree, used - 1)
    return ErrorModelType1(polyfit(centers, means, deg, weights=wts), polyfit(centers, stds, deg, weights=wts),
                           lo, hi, batch_index)


def inject_type1(y_proxy, model: ErrorModelType1 | None, key: InjectionKey) -> np.ndarray:
    """``y + mean(y) + std(y) * z`` with ``z`` drawn from the keyed generator."""
    if model is None:
        raise RuntimeError("Type 1 error model has not been calibrated")
    y = np.asarray(y_proxy, dtype=np.float64)
    z = key.normals(y.shape)
    counters.bump("inject_calls")
    yc = model._clamp(y)
    z *= np.maximum(polyval(model.std_poly, yc), 0.0)
    z += polyval(model.mean_poly, yc)
    z += y
    return z.astype(np.float32)


def calibrate_type2(y_accurate, y_exact, batch_index: int = -1) -> ErrorModelType2:
    """Population mean and variance of the layer-wide error."""
    e = np.asarray(y_accurate, dtype=np.float64) - np.asarray(y_exact, dtype=np.float64)
    counters.bump("type2_calibrations")
    return ErrorModelType2(float(e.mean()), float(e.var()), batch_index)


def inject_type2(y, model: ErrorModelType2 | None, key: InjectionKey) -> np.ndarray:
    if model is None:
        raise RuntimeError("Type 2 error model has not been calibrated")
    y = np.asarray(y, dtype=np.float64)
    z = key.normals(y.shape)
    counters.bump("inject_calls")
    return (y + model.mean + np.sqrt(model.var) * z).astype(np.float32)


class InjectType1(PointwiseFn):
    """Keyed Type 1 injection.

    Both correction terms are treated as an additive perturbation of the proxy
    output: the local gradient is 1. The proxy carries the nonlinearity for
    backward; differentiating the fitted mean curve amplified gradients at
    sparsely populated domain edges and trained worse.
    """

    stochastic = True
    flops_per_element = 20
    name = "inject_type1"

    def __init__(self, model: ErrorModelType1 | None, key: InjectionKey | None):
        if model is None:
            raise RuntimeError("Type 1 error model has not been calibrated")
        self.model = model
        self.key = key

    def forward(self, y):
        return inject_type1(y, self.model, self.key), ()

    def residuals(self, y):
        return ()

    def backward(self, residuals, g):
        return (g,)


class InjectType2(PointwiseFn):
    stochastic = True
    flops_per_element = 4
    name = "inject_type2"

    def __init__(self, model: ErrorModelType2 | None, key: InjectionKey | None):
        if model is None:
            raise RuntimeError("Type 2 error model has not been calibrated")
        self.model = model
        self.key = key

    def forward(self, y):
        return inject_type2(y, self.model, self.key), ()

    def residuals(self, y):
        return ()

    def backward(self, residuals, g):
        return (g,)
