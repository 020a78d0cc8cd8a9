"""Dense layers with hand-written forward and backward passes.

Everything works on float64 numpy arrays of shape ``(batch, features)``.
Forward functions return the output plus whatever the matching backward
function needs; nothing here keeps hidden state except the batch-norm
running statistics, which only change in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError

LEAKY_ALPHA = 0.3


def as_matrix(x, name="matrix", check_finite=True) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array, rejecting NaN/Inf when asked."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if check_finite and not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _float(a) -> np.ndarray:
    # extended precision passes through so gradient checks can use it
    a = np.asarray(a)
    return a if a.dtype == np.longdouble else a.astype(np.float64, copy=False)


@dataclass
class AffineLayer:
    W: np.ndarray
    b: np.ndarray
    l1_coeff: float = 0.0

    def __post_init__(self):
        self.W = _float(self.W)
        self.b = _float(self.b).reshape(-1)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"bias of shape {self.b.shape} does not fit weights {self.W.shape}")
        if self.l1_coeff < 0:
            raise ValueError("l1_coeff must be non-negative")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def l1_penalty(self) -> float:
        return self.l1_coeff * np.abs(self.W).sum()


def affine_forward(x: np.ndarray, layer: AffineLayer) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match layer input {layer.in_dim}")
    return x @ layer.W + layer.b


def affine_backward(x: np.ndarray, layer: AffineLayer, dY: np.ndarray):
    """Return ``(dX, dW, dB)``; ``dW`` includes the L1 subgradient."""
    if dY.shape != (x.shape[0], layer.out_dim) or x.shape[1] != layer.in_dim:
        raise ShapeError(f"upstream gradient {dY.shape} inconsistent with input {x.shape} "
                         f"and layer {layer.W.shape}")
    dW = x.T @ dY
    if layer.l1_coeff:
        dW += layer.l1_coeff * np.sign(layer.W)
    return dY @ layer.W.T, dW, dY.sum(axis=0)


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta_shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5

    @classmethod
    def create(cls, dim: int, momentum: float = 0.99, eps: float = 1e-5) -> "BatchNormLayer":
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), momentum, eps)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mean: np.ndarray
    var: np.ndarray


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, mode: str = "train",
                      update_running: bool = True):
    """Normalize each feature, then scale by ``gamma`` and shift by ``beta_shift``.

    Train mode uses the biased batch statistics and (unless
    ``update_running`` is false) folds them into the running averages.
    Infer mode uses the running statistics and returns ``cache=None``.
    """
    if x.ndim != 2 or x.shape[1] != layer.dim:
        raise ShapeError(f"input of shape {x.shape} does not match batch norm width {layer.dim}")
    if mode == "infer":
        y = (x - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
        return layer.gamma * y + layer.beta_shift, None
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if x.shape[0] < 2:
        raise ValueError("batch too small for batch norm")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    x_hat = (x - mean) * inv_std
    if update_running:
        m = layer.momentum
        layer.running_mean = m * layer.running_mean + (1 - m) * mean
        layer.running_var = m * layer.running_var + (1 - m) * var
    return layer.gamma * x_hat + layer.beta_shift, BatchNormCache(x_hat, inv_std, layer.gamma, mean, var)


def batchnorm_backward(cache: BatchNormCache, dY: np.ndarray):
    """Return ``(dX, dGamma, dBetaShift)`` for a train-mode forward pass."""
    if dY.shape != cache.x_hat.shape:
        raise ShapeError(f"upstream gradient {dY.shape} != cached activations {cache.x_hat.shape}")
    n = dY.shape[0]
    d_beta = dY.sum(axis=0)
    d_gamma = (dY * cache.x_hat).sum(axis=0)
    dx_hat = dY * cache.gamma
    dX = (cache.inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0)
                                - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=0))
    return dX, d_gamma, d_beta


# activations: kind is "relu", "sigmoid" or "leaky_relu" (slope ``alpha``)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so it never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e)
    out /= 1.0 + e
    return out


def activation_forward(kind: str, x: np.ndarray, alpha: float = LEAKY_ALPHA) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, alpha * x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(kind: str, x: np.ndarray, dY: np.ndarray, alpha: float = LEAKY_ALPHA,
                        y: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``x``.

    ``y`` may pass in an already computed forward output to save work.
    """
    if kind == "relu":
        return dY * (x > 0)
    if kind == "leaky_relu":
        return dY * np.where(x > 0, 1.0, alpha)
    if kind == "sigmoid":
        s = sigmoid(x) if y is None else y
        return dY * s * (1.0 - s)
    raise ValueError(f"unknown activation {kind!r}")


def dropout_forward(x: np.ndarray, rate: float, mode: str = "train",
                    rng: Optional[np.random.Generator] = None, mask: Optional[np.ndarray] = None):
    """Inverted dropout. Returns ``(y, mask)`` where ``mask`` is boolean keep.

    A precomputed ``mask`` can be supplied to replay a pass exactly.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, np.ones(x.shape, dtype=bool)
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or a mask")
        mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(dY: np.ndarray, mask: np.ndarray, rate: float) -> np.ndarray:
    if rate == 0.0:
        return dY
    return dY * mask / (1.0 - rate)


@dataclass
class RmsPropState:
    cache: list
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr=1e-3, rho=0.9, eps=1e-8) -> "RmsPropState":
        return cls([np.zeros_like(p) for p in params], lr, rho, eps)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0 or self.lr <= 0 or self.eps <= 0:
            raise ValueError("need 0 < rho < 1, lr > 0 and eps > 0")


def rmsprop_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: RmsPropState):
    """One RMSprop update. Returns new ``(params, state)``; inputs are not modified."""
    if len(params) != len(grads) or len(params) != len(state.cache):
        raise ShapeError("params, grads and optimizer cache differ in length")
    new_params, new_cache = [], []
    for p, g, old in zip(params, grads, state.cache):
        if p.shape != g.shape or p.shape != old.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape}, cache {old.shape} disagree")
        c = np.multiply(g, g)
        c *= 1.0 - state.rho
        c += state.rho * old
        step = np.sqrt(c)
        step += state.eps
        np.divide(g, step, out=step)
        step *= state.lr
        new_cache.append(c)
        new_params.append(np.subtract(p, step, out=step))
    return new_params, RmsPropState(new_cache, state.lr, state.rho, state.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    worst: Optional[tuple] = None  # (param index, flat index, analytic, numeric)
    per_param: list = field(default_factory=list)
    n_checked: int = 0

    def __bool__(self):
        return self.n_checked > 0


def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                      analytic: Sequence[np.ndarray], epsilon: float = 1e-5,
                      coords: Optional[int] = None, rng: Optional[np.random.Generator] = None
                      ) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn``.

    ``params`` are perturbed in place and restored; ``loss_fn`` must read
    them and be deterministic. ``coords`` limits the check to that many
    randomly chosen coordinates per parameter. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    report = GradCheckReport()
    for pi, (p, a) in enumerate(zip(params, analytic)):
        flat = p.reshape(-1)
        if flat.base is not p and not np.shares_memory(flat, p):
            raise ValueError("parameters must be contiguous arrays")
        idx = np.arange(flat.size)
        if coords is not None and flat.size > coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, coords, replace=False)
        a_flat = np.asarray(a).reshape(-1)
        worst_here = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + epsilon
            up = loss_fn()
            flat[j] = orig - epsilon
            down = loss_fn()
            flat[j] = orig
            num = (up - down) / (2 * epsilon)
            err = abs(a_flat[j] - num) / max(abs(a_flat[j]), abs(num), 1e-8)
            worst_here = max(worst_here, err)
            if err >= report.max_rel_error:
                report.max_rel_error = err
                report.worst = (pi, int(j), float(a_flat[j]), float(num))
            report.n_checked += 1
        report.per_param.append(worst_here)
    return report
