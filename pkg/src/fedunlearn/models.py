"""Small differentiable models with closed-form gradients.

Three kinds:

* ``softmax_regression`` -- linear multiclass classifier (no bias) with mean
  cross-entropy plus an L2 penalty (lambda/2)||w||^2.  With lambda > 0 the
  loss is lambda-strongly convex, and its smoothness constant has the analytic
  bound lambda + max_i ||x_i||^2 / 2.
* ``mlp2`` -- one tanh hidden layer; exercises the non-convex path only.
* ``quadratic_probe`` -- L(w) = 1/2 (w - w*)' H (w - w*) with a fixed diagonal
  H and a data-derived target w* (the mean feature vector), so per-client
  losses differ while the curvature constants stay exactly known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .numerics import ParamVector, as_param_vector

MODEL_KINDS = ("softmax_regression", "mlp2", "quadratic_probe")
MLP_HIDDEN = 32


@dataclass(frozen=True)
class ModelSpec:
    """Model family plus its shape and regularization."""

    kind: str
    dims: list[int]  # [input_dim, n_classes]; probe uses [dim]
    l2_lambda: float = 0.0
    probe_hessian: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be nonnegative")
        if self.kind == "quadratic_probe":
            if self.probe_hessian is None:
                raise ValueError("quadratic_probe requires probe_hessian")
            h = np.asarray(self.probe_hessian)
            if h.ndim != 1 or len(h) != self.dims[0]:
                raise ValueError("probe_hessian must be a diagonal of length dims[0]")
            if h.min() <= 0:
                raise ValueError("probe_hessian entries must be positive")

    @property
    def n_params(self) -> int:
        if self.kind == "softmax_regression":
            d_in, c = self.dims
            return d_in * c
        if self.kind == "mlp2":
            d_in, c = self.dims
            h = MLP_HIDDEN
            return d_in * h + h + h * c + c
        return self.dims[0]


@dataclass
class ConvexityProfile:
    """Curvature constants for the convergence-bound check.

    ``hvp_error_m`` is measured by the unlearning engine as the largest
    observed gap between the update it used and the client's exact gradient.
    """

    mu: float
    lipschitz_l: float
    hvp_error_m: float = 0.0

    def __post_init__(self) -> None:
        if not 0 < self.mu <= self.lipschitz_l:
            raise ValueError("need 0 < mu <= L")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Small random initialization; dimension fixed by the spec."""
    return 0.01 * rng.normal(size=spec.n_params)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probe_target(spec: ModelSpec, data: LabeledDataset) -> ParamVector:
    if data.dim != spec.dims[0]:
        raise ValueError("probe dimension must equal the feature dimension")
    return data.features.mean(axis=0)


def _unpack_mlp(spec: ModelSpec, params: ParamVector):
    d_in, c = spec.dims
    h = MLP_HIDDEN
    o = 0
    w1 = params[o:o + d_in * h].reshape(h, d_in); o += d_in * h
    b1 = params[o:o + h]; o += h
    w2 = params[o:o + h * c].reshape(c, h); o += h * c
    b2 = params[o:o + c]
    return w1, b1, w2, b2


def loss(spec: ModelSpec, params: ParamVector, data: LabeledDataset) -> float:
    """Mean cross-entropy plus (lambda/2)||w||^2, or the quadratic probe value."""
    params = as_param_vector(params, dim=spec.n_params)
    if spec.kind == "quadratic_probe":
        h = np.asarray(spec.probe_hessian)
        delta = params - _probe_target(spec, data)
        return 0.5 * float(delta @ (h * delta))

    if spec.kind == "softmax_regression":
        d_in, c = spec.dims
        logits = data.features @ params.reshape(c, d_in).T
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, params)
        hidden = np.tanh(data.features @ w1.T + b1)
        logits = hidden @ w2.T + b2
    p = _softmax(logits)
    n = len(data)
    nll = -np.log(np.maximum(p[np.arange(n), data.labels], 1e-300)).mean()
    return float(nll + 0.5 * spec.l2_lambda * params @ params)


def gradient(spec: ModelSpec, params: ParamVector, data: LabeledDataset) -> ParamVector:
    """Exact analytic gradient of ``loss``."""
    params = as_param_vector(params, dim=spec.n_params)
    if spec.kind == "quadratic_probe":
        h = np.asarray(spec.probe_hessian)
        return h * (params - _probe_target(spec, data))

    n = len(data)
    if spec.kind == "softmax_regression":
        d_in, c = spec.dims
        w = params.reshape(c, d_in)
        p = _softmax(data.features @ w.T)
        p[np.arange(n), data.labels] -= 1.0
        grad_w = p.T @ data.features / n
        return grad_w.ravel() + spec.l2_lambda * params

    d_in, c = spec.dims
    w1, b1, w2, b2 = _unpack_mlp(spec, params)
    pre = data.features @ w1.T + b1
    hidden = np.tanh(pre)
    p = _softmax(hidden @ w2.T + b2)
    p[np.arange(n), data.labels] -= 1.0
    p /= n
    g_w2 = p.T @ hidden
    g_b2 = p.sum(axis=0)
    back = (p @ w2) * (1.0 - hidden ** 2)
    g_w1 = back.T @ data.features
    g_b1 = back.sum(axis=0)
    flat = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    return flat + spec.l2_lambda * params


def predict(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class id."""
    if spec.kind == "quadratic_probe":
        raise ValueError("quadratic_probe is not a classifier")
    params = as_param_vector(params, dim=spec.n_params)
    if spec.kind == "softmax_regression":
        d_in, c = spec.dims
        logits = features @ params.reshape(c, d_in).T
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, params)
        logits = np.tanh(features @ w1.T + b1) @ w2.T + b2
    return logits.argmax(axis=1)


def test_error_rate(spec: ModelSpec, params: ParamVector, data: LabeledDataset) -> float:
    """Fraction of misclassified samples."""
    return float((predict(spec, params, data.features) != data.labels).mean())


test_error_rate.__test__ = False  # keep pytest from collecting the imported name


def convexity_profile(spec: ModelSpec, data: LabeledDataset) -> ConvexityProfile:
    """Analytic strong-convexity and smoothness constants.

    quadratic_probe: exact min/max of the diagonal.  softmax_regression with
    lambda > 0: mu = lambda and L = lambda + max_i ||x_i||^2 / 2, using the
    1/2 spectral bound on the softmax Jacobian.
    """
    if spec.kind == "quadratic_probe":
        h = np.asarray(spec.probe_hessian)
        return ConvexityProfile(mu=float(h.min()), lipschitz_l=float(h.max()))
    if spec.kind == "softmax_regression":
        if spec.l2_lambda <= 0:
            raise ValueError("softmax profile requires l2_lambda > 0")
        row_norms_sq = np.einsum("ij,ij->i", data.features, data.features)
        bound = spec.l2_lambda + 0.5 * float(row_norms_sq.max(initial=0.0))
        return ConvexityProfile(mu=spec.l2_lambda, lipschitz_l=bound)
    raise ValueError(f"{spec.kind} has no convexity profile")
