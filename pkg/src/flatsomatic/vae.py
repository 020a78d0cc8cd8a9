"""Multilayer-perceptron variational autoencoder for binary occurrence rows.

Architecture (``h1, h2`` = encoder widths, ``d`` = latent size)::

    x -> Affine(m,h1) -> BN -> LeakyReLU -> Dropout
      -> Affine(h1,h2) -> BN -> LeakyReLU -> {mu: Affine(h2,d), logvar: Affine(h2,d)}
    z -> Affine(d,g1) -> BN -> ReLU -> Dropout
      -> Affine(g1,g2) -> BN -> ReLU -> Affine(g2,m) -> Sigmoid

Gradients are written out by hand; :func:`total_loss` returns them in the
order of :meth:`VaeModel.parameters`.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import sparse

from . import _random
from .data import OccurrenceMatrix
from .errors import ConfigError, FormatError, ShapeError
from .kernels import (AffineLayer, BatchNormLayer, RmsPropState, activation_backward,
                      activation_forward, affine_backward, affine_forward, batchnorm_backward,
                      batchnorm_forward, dropout_backward, dropout_forward, rmsprop_step)
from .metrics import binarize, cosine_similarity, micro_f1

logger = logging.getLogger(__name__)

LOSS_KINDS = ("bce", "soft_f1")
LATENT_SWEEP = (2, 8, 32, 64, 128, 256, 512)
BCE_CLAMP = 1e-7


@dataclass
class VaeConfig:
    input_dim: Optional[int] = None
    encoder_units: tuple = (1024, 512)
    latent_dim: int = 32
    decoder_units: Optional[tuple] = None
    dropout_rate: float = 0.2
    l1_coeff: float = 1e-7
    leaky_alpha: float = 0.3
    loss_kind: str = "soft_f1"
    beta_max: float = 1e-2
    warmup_epochs: int = 20
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    rho: float = 0.9
    rms_eps: float = 1e-8
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    seed: int = 42

    def __post_init__(self):
        self.encoder_units = tuple(self.encoder_units)
        if self.decoder_units is None:
            self.decoder_units = tuple(reversed(self.encoder_units))
        self.decoder_units = tuple(self.decoder_units)

    def problems(self) -> list[str]:
        """Every violated constraint, as human-readable strings."""
        out = []
        if self.input_dim is not None and self.input_dim < 1:
            out.append(f"input_dim must be >= 1, got {self.input_dim}")
        for name in ("encoder_units", "decoder_units"):
            units = getattr(self, name)
            if len(units) != 2 or any(int(u) < 1 for u in units):
                out.append(f"{name} must be two widths >= 1, got {list(units)}")
        if self.latent_dim < 1:
            out.append(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.l1_coeff < 0:
            out.append(f"l1_coeff must be >= 0, got {self.l1_coeff}")
        if not 0.0 < self.leaky_alpha < 1.0:
            out.append(f"leaky_alpha must lie in (0, 1), got {self.leaky_alpha}")
        if self.loss_kind not in LOSS_KINDS:
            out.append(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.beta_max < 0:
            out.append(f"beta_max must be >= 0, got {self.beta_max}")
        if self.warmup_epochs < 0:
            out.append(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            out.append(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.learning_rate <= 0:
            out.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.rho < 1.0:
            out.append(f"rho must lie in (0, 1), got {self.rho}")
        if self.rms_eps <= 0 or self.bn_eps <= 0:
            out.append("rms_eps and bn_eps must be > 0")
        if not 0.0 < self.bn_momentum < 1.0:
            out.append(f"bn_momentum must lie in (0, 1), got {self.bn_momentum}")
        return out

    def validate(self) -> "VaeConfig":
        bad = self.problems()
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_units"] = list(self.encoder_units)
        d["decoder_units"] = list(self.decoder_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown VaeConfig field {k!r}" for k in unknown])
        return cls(**d)


# layer names in parameter / checkpoint order
AFFINES = ("enc1", "enc2", "mu", "logvar", "dec1", "dec2", "out")
BATCHNORMS = ("bn_enc1", "bn_enc2", "bn_dec1", "bn_dec2")
LAYER_ORDER = ("enc1", "bn_enc1", "enc2", "bn_enc2", "mu", "logvar",
               "dec1", "bn_dec1", "dec2", "bn_dec2", "out")
# affine layers followed by batch norm: their bias is cancelled by the
# normalisation, so it stays at zero and is not trained
_BN_FED = frozenset({"enc1", "enc2", "dec1", "dec2"})


@dataclass
class VaeModel:
    config: VaeConfig
    layers: dict

    @property
    def input_dim(self) -> int:
        return self.layers["enc1"].in_dim

    @property
    def latent_dim(self) -> int:
        return self.layers["mu"].out_dim

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays as ``(name, array)`` pairs, in a fixed order."""
        out = []
        for name in LAYER_ORDER:
            layer = self.layers[name]
            if isinstance(layer, AffineLayer):
                out.append((f"{name}.W", layer.W))
                if name not in _BN_FED:
                    out.append((f"{name}.b", layer.b))
            else:
                out.append((f"{name}.gamma", layer.gamma))
                out.append((f"{name}.beta_shift", layer.beta_shift))
        return out

    def set_parameters(self, arrays: Sequence[np.ndarray]) -> None:
        names = [n for n, _ in self.parameters()]
        if len(arrays) != len(names):
            raise ShapeError(f"expected {len(names)} arrays, got {len(arrays)}")
        for name, arr in zip(names, arrays):
            layer, attr = name.split(".")
            setattr(self.layers[layer], attr, arr)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All stored arrays (trainable and running statistics), checkpoint order."""
        out = []
        for name in LAYER_ORDER:
            layer = self.layers[name]
            attrs = ("W", "b") if isinstance(layer, AffineLayer) else (
                "gamma", "beta_shift", "running_mean", "running_var")
            out.extend((f"{name}.{a}", getattr(layer, a)) for a in attrs)
        return out

    def l1_penalty(self) -> float:
        return sum(self.layers[n].l1_penalty() for n in AFFINES)

    def astype(self, dtype) -> "VaeModel":
        """Deep copy with every array cast to ``dtype``."""
        layers = {}
        for name, layer in self.layers.items():
            if isinstance(layer, AffineLayer):
                layers[name] = AffineLayer(layer.W.astype(dtype), layer.b.astype(dtype), layer.l1_coeff)
            else:
                layers[name] = BatchNormLayer(*(getattr(layer, a).astype(dtype) for a in (
                    "gamma", "beta_shift", "running_mean", "running_var")), layer.momentum, layer.eps)
        return VaeModel(self.config, layers)


def _layer_dims(config: VaeConfig):
    m, d = config.input_dim, config.latent_dim
    h1, h2 = config.encoder_units
    g1, g2 = config.decoder_units
    return {"enc1": (m, h1), "enc2": (h1, h2), "mu": (h2, d), "logvar": (h2, d),
            "dec1": (d, g1), "dec2": (g1, g2), "out": (g2, m)}


def init_model(config: VaeConfig, rng: Optional[np.random.Generator] = None) -> VaeModel:
    """Glorot-uniform weights, zero biases, unit ``gamma`` and zero shift."""
    if config.input_dim is None:
        raise ConfigError("input_dim must be set before building a model")
    config.validate()
    rng = rng if rng is not None else _random.stream(config.seed, _random.INIT)
    dims = _layer_dims(config)
    layers = {}
    for name in LAYER_ORDER:
        if name.startswith("bn_"):
            width = dims[name[3:]][1]
            layers[name] = BatchNormLayer.create(width, config.bn_momentum, config.bn_eps)
        else:
            fan_in, fan_out = dims[name]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers[name] = AffineLayer(W, np.zeros(fan_out), config.l1_coeff)
    return VaeModel(config, layers)


@dataclass
class EncoderOutput:
    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ")


def _float_array(a) -> np.ndarray:
    # float64 unless already extended precision (used by gradient checks)
    a = np.asarray(a)
    return a if a.dtype == np.longdouble else a.astype(np.float64, copy=False)


def _check_input(model: VaeModel, x) -> np.ndarray:
    x = _float_array(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of shape (batch, {model.input_dim}), got {x.shape}")
    return x


def encode(model: VaeModel, x) -> EncoderOutput:
    """Posterior parameters in inference mode (no dropout, running BN stats)."""
    x = _check_input(model, x)
    L, alpha = model.layers, model.config.leaky_alpha
    h, _ = batchnorm_forward(affine_forward(x, L["enc1"]), L["bn_enc1"], "infer")
    h = activation_forward("leaky_relu", h, alpha)
    h, _ = batchnorm_forward(affine_forward(h, L["enc2"]), L["bn_enc2"], "infer")
    h = activation_forward("leaky_relu", h, alpha)
    return EncoderOutput(affine_forward(h, L["mu"]), affine_forward(h, L["logvar"]))


def decode(model: VaeModel, z) -> np.ndarray:
    """Reconstruction probabilities in inference mode."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(f"expected latent input of shape (batch, {model.latent_dim}), got {z.shape}")
    L = model.layers
    h, _ = batchnorm_forward(affine_forward(z, L["dec1"]), L["bn_dec1"], "infer")
    h = activation_forward("relu", h)
    h, _ = batchnorm_forward(affine_forward(h, L["dec2"]), L["bn_dec2"], "infer")
    h = activation_forward("relu", h)
    return activation_forward("sigmoid", affine_forward(h, L["out"]))


def reconstruct(model: VaeModel, x, chunk: int = 1024) -> np.ndarray:
    """``decode(encode(x).mu)`` evaluated in row chunks."""
    x = _check_input(model, x)
    parts = [decode(model, encode(model, x[i:i + chunk]).mu) for i in range(0, len(x), chunk)]
    return np.vstack(parts) if parts else np.empty((0, model.input_dim))


def reparameterize(enc: EncoderOutput, rng: Optional[np.random.Generator] = None,
                   eps: Optional[np.ndarray] = None) -> np.ndarray:
    """``z = mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` from ``rng``."""
    if eps is None:
        eps = rng.standard_normal(enc.mu.shape)
    return enc.mu + np.exp(0.5 * enc.logvar) * eps


def kl_divergence(enc: EncoderOutput) -> float:
    """Batch-mean KL divergence of ``N(mu, exp(logvar))`` from ``N(0, I)``."""
    terms = np.expm1(enc.logvar) - enc.logvar + enc.mu ** 2
    return 0.5 * terms.sum() / enc.mu.shape[0]


def bce_loss(x, x_hat) -> tuple[float, np.ndarray]:
    """Binary cross-entropy summed over features, averaged over rows.

    ``x_hat`` is clamped to ``[1e-7, 1 - 1e-7]``; the gradient is zero where
    clamping is active.
    """
    x, x_hat = _float_array(x), _float_array(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    n = x.shape[0] if x.ndim == 2 else 1
    p = np.clip(x_hat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -(x * np.log(p) + (1.0 - x) * np.log1p(-p)).sum() / n
    inside = (x_hat >= BCE_CLAMP) & (x_hat <= 1.0 - BCE_CLAMP)
    grad = np.where(inside, (-x / p + (1.0 - x) / (1.0 - p)) / n, 0.0)
    return value, grad


def soft_f1_loss(x, x_hat) -> tuple[float, np.ndarray]:
    """``1 - 2TP / (2TP + FP + FN)`` with probabilistic counts pooled over the batch.

    With ``TP = sum(x * x_hat)`` the denominator simplifies to
    ``sum(x) + sum(x_hat)``.
    """
    x, x_hat = _float_array(x), _float_array(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    tp = (x * x_hat).sum()
    denom = x.sum() + x_hat.sum()
    if denom == 0.0:
        return denom * 0.0, np.zeros_like(x_hat)
    f1 = 2.0 * tp / denom
    grad = -(2.0 * x / denom - 2.0 * tp / denom ** 2)
    return 1.0 - f1, grad


RECON_LOSSES: dict[str, Callable] = {"bce": bce_loss, "soft_f1": soft_f1_loss}


def beta_schedule(epoch: int, config: VaeConfig) -> float:
    """Linear KL warm-up from 0 to ``beta_max`` over ``warmup_epochs``."""
    if config.warmup_epochs == 0:
        return float(config.beta_max)
    return float(config.beta_max) * min(1.0, epoch / config.warmup_epochs)


@dataclass
class Noise:
    """Every random draw of one training forward pass, for exact replay."""

    enc_mask: np.ndarray
    dec_mask: np.ndarray
    eps: np.ndarray


def sample_noise(model: VaeModel, batch: int, rng: np.random.Generator) -> Noise:
    c = model.config
    p = c.dropout_rate
    h1, g1 = c.encoder_units[0], c.decoder_units[0]
    enc_mask = rng.random((batch, h1)) >= p if p else np.ones((batch, h1), dtype=bool)
    dec_mask = rng.random((batch, g1)) >= p if p else np.ones((batch, g1), dtype=bool)
    return Noise(enc_mask, dec_mask, rng.standard_normal((batch, model.latent_dim)))


@dataclass
class LossResult:
    value: float
    recon: float
    kl: float
    l1: float
    beta: float
    grads: list = field(repr=False)
    x_hat: Optional[np.ndarray] = field(default=None, repr=False)


def total_loss(model: VaeModel, x, epoch: int = 0, rng: Optional[np.random.Generator] = None,
               noise: Optional[Noise] = None, beta: Optional[float] = None,
               update_running: bool = False) -> LossResult:
    """Training objective and its exact gradient for one minibatch.

    ``recon(x, x_hat) + beta * KL + sum(l1_coeff * |W|)``, with ``beta`` taken
    from :func:`beta_schedule` unless given. Randomness comes from ``noise``
    when supplied, otherwise it is drawn from ``rng``.
    """
    x = _check_input(model, x)
    cfg, L = model.config, model.layers
    alpha, p = cfg.leaky_alpha, cfg.dropout_rate
    n = x.shape[0]
    if noise is None:
        if rng is None:
            raise ValueError("total_loss needs either rng or noise")
        noise = sample_noise(model, n, rng)
    if beta is None:
        beta = beta_schedule(epoch, cfg)

    # encoder
    x_in = _sparse_input(x)
    pre1 = _input_layer_forward(x_in, L["enc1"])
    bn1, c1 = batchnorm_forward(pre1, L["bn_enc1"], "train", update_running)
    a1 = activation_forward("leaky_relu", bn1, alpha)
    d1, _ = dropout_forward(a1, p, "train", mask=noise.enc_mask)
    pre2 = affine_forward(d1, L["enc2"])
    bn2, c2 = batchnorm_forward(pre2, L["bn_enc2"], "train", update_running)
    a2 = activation_forward("leaky_relu", bn2, alpha)
    enc = EncoderOutput(affine_forward(a2, L["mu"]), affine_forward(a2, L["logvar"]))
    std = np.exp(0.5 * enc.logvar)
    z = enc.mu + std * noise.eps
    # decoder
    pre3 = affine_forward(z, L["dec1"])
    bn3, c3 = batchnorm_forward(pre3, L["bn_dec1"], "train", update_running)
    a3 = activation_forward("relu", bn3)
    d3, _ = dropout_forward(a3, p, "train", mask=noise.dec_mask)
    pre4 = affine_forward(d3, L["dec2"])
    bn4, c4 = batchnorm_forward(pre4, L["bn_dec2"], "train", update_running)
    a4 = activation_forward("relu", bn4)
    logits = affine_forward(a4, L["out"])
    x_hat = activation_forward("sigmoid", logits)

    recon, d_xhat = RECON_LOSSES[cfg.loss_kind](x, x_hat)
    kl = kl_divergence(enc)
    l1 = model.l1_penalty()

    g = {}
    d = activation_backward("sigmoid", logits, d_xhat, y=x_hat)
    d, g["out.W"], g["out.b"] = affine_backward(a4, L["out"], d)
    d = activation_backward("relu", bn4, d)
    d, g["bn_dec2.gamma"], g["bn_dec2.beta_shift"] = batchnorm_backward(c4, d)
    d, g["dec2.W"], _ = affine_backward(d3, L["dec2"], d)
    d = dropout_backward(d, noise.dec_mask, p)
    d = activation_backward("relu", bn3, d)
    d, g["bn_dec1.gamma"], g["bn_dec1.beta_shift"] = batchnorm_backward(c3, d)
    dz, g["dec1.W"], _ = affine_backward(z, L["dec1"], d)

    d_mu = dz + beta * enc.mu / n
    d_logvar = dz * noise.eps * 0.5 * std + beta * 0.5 * (np.exp(enc.logvar) - 1.0) / n
    da2_mu, g["mu.W"], g["mu.b"] = affine_backward(a2, L["mu"], d_mu)
    da2_lv, g["logvar.W"], g["logvar.b"] = affine_backward(a2, L["logvar"], d_logvar)
    d = activation_backward("leaky_relu", bn2, da2_mu + da2_lv, alpha)
    d, g["bn_enc2.gamma"], g["bn_enc2.beta_shift"] = batchnorm_backward(c2, d)
    d, g["enc2.W"], _ = affine_backward(d1, L["enc2"], d)
    d = dropout_backward(d, noise.enc_mask, p)
    d = activation_backward("leaky_relu", bn1, d, alpha)
    d, g["bn_enc1.gamma"], g["bn_enc1.beta_shift"] = batchnorm_backward(c1, d)
    g["enc1.W"] = _input_layer_grad(x_in, L["enc1"], d)

    grads = [g[name] for name, _ in model.parameters()]
    return LossResult(recon + beta * kl + l1, recon, kl, l1, beta, grads, x_hat)


def _sparse_input(x: np.ndarray):
    # occurrence rows are mostly zeros; a CSR copy makes the input layer cheap
    if x.dtype == np.float64 and np.count_nonzero(x) < 0.1 * x.size:
        return sparse.csr_matrix(x)
    return x


def _input_layer_forward(x, layer: AffineLayer) -> np.ndarray:
    if sparse.issparse(x):
        if x.shape[1] != layer.in_dim:
            raise ShapeError(f"input of shape {x.shape} does not match layer input {layer.in_dim}")
        return np.asarray(x @ layer.W) + layer.b
    return affine_forward(x, layer)


def _input_layer_grad(x, layer: AffineLayer, dY: np.ndarray) -> np.ndarray:
    # the input-layer dX is never needed, so skip that product
    dW = np.asarray(x.T @ dY)
    if layer.l1_coeff:
        dW += layer.l1_coeff * np.sign(layer.W)
    return dW


# --------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    recon_loss: float
    kl: float
    val_f1: Optional[float] = None
    val_cosine: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainHistory":
        return cls([EpochRecord(**json.loads(line)) for line in text.splitlines() if line.strip()])


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:  # batch norm needs two rows; a lone leftover row is skipped
            yield idx


def validation_metrics(model: VaeModel, x: np.ndarray, threshold: float = 0.5):
    """``(micro_f1, cosine)`` of inference-mode reconstructions of ``x``."""
    x_hat = reconstruct(model, x)
    return micro_f1(x, binarize(x_hat, threshold))[0], cosine_similarity(x, x_hat)


def train(matrix: OccurrenceMatrix, config: VaeConfig, validation_indices=None,
          callback: Optional[Callable[[EpochRecord], None]] = None):
    """Fit a VAE to the rows of ``matrix`` not listed in ``validation_indices``.

    Returns ``(model, history)``. Held-out rows, when given, are scored in
    inference mode after every epoch. Results depend only on
    ``(matrix, config)``.
    """
    if matrix.n_samples == 0 or matrix.n_features == 0:
        raise ValueError("cannot train on an empty matrix")
    if config.input_dim is None:
        config = replace(config, input_dim=matrix.n_features)
    config.validate()
    if config.input_dim != matrix.n_features:
        raise ShapeError(f"config input_dim {config.input_dim} != matrix width {matrix.n_features}")
    all_idx = np.arange(matrix.n_samples)
    val_idx = None
    if validation_indices is not None and len(validation_indices):
        val_idx = np.unique(np.asarray(validation_indices, dtype=np.int64))
        train_idx = np.setdiff1d(all_idx, val_idx)
    else:
        train_idx = all_idx
    if config.batch_size > len(train_idx):
        raise ValueError(f"batch_size {config.batch_size} exceeds the {len(train_idx)} training rows")

    model = init_model(config)
    params = [a for _, a in model.parameters()]
    opt = RmsPropState.zeros_like(params, config.learning_rate, config.rho, config.rms_eps)
    x_val = matrix.dense(val_idx) if val_idx is not None else None
    history = TrainHistory()

    for epoch in range(config.epochs):
        beta = beta_schedule(epoch, config)
        order = _random.stream(config.seed, _random.SHUFFLE, epoch).permutation(train_idx)
        noise_rng = _random.stream(config.seed, _random.NOISE, epoch)
        recon_sum = kl_sum = 0.0
        n_batches = 0
        for idx in _batches(order, config.batch_size):
            res = total_loss(model, matrix.dense(idx), epoch, rng=noise_rng, beta=beta,
                             update_running=True)
            params, opt = rmsprop_step(params, res.grads, opt)
            model.set_parameters(params)
            recon_sum += res.recon
            kl_sum += res.kl
            n_batches += 1
        rec = EpochRecord(epoch, beta, recon_sum / n_batches, kl_sum / n_batches)
        if x_val is not None:
            rec.val_f1, rec.val_cosine = validation_metrics(model, x_val)
        history.records.append(rec)
        logger.debug("epoch %d: %s", epoch, rec)
        if callback is not None:
            callback(rec)
    return model, history


def embed(model: VaeModel, matrix, chunk: int = 1024) -> np.ndarray:
    """Posterior means for every row of ``matrix`` (an OccurrenceMatrix or array)."""
    if isinstance(matrix, OccurrenceMatrix):
        if matrix.n_features != model.input_dim:
            raise ShapeError(f"matrix has {matrix.n_features} columns, model expects {model.input_dim}")
        n = matrix.n_samples
        parts = [encode(model, matrix.dense(np.arange(i, min(i + chunk, n)))).mu
                 for i in range(0, n, chunk)]
        return np.vstack(parts) if parts else np.empty((0, model.latent_dim))
    return encode(model, matrix).mu


# --------------------------------------------------------------------------
# FSOM checkpoint
#
#   b"FSOM" | u16 version | u64 config length | config JSON (utf-8)
#   | arrays of VaeModel.state_arrays() in order, raw little-endian float64
#
# Array order: enc1 W,b; bn_enc1 gamma,beta_shift,running_mean,running_var;
# enc2 W,b; bn_enc2 ...; mu W,b; logvar W,b; dec1 W,b; bn_dec1 ...; dec2 W,b;
# bn_dec2 ...; out W,b. Shapes follow from the config.

FSOM_MAGIC = b"FSOM"
FSOM_VERSION = 1


def checkpoint_bytes(model: VaeModel) -> bytes:
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(FSOM_MAGIC + struct.pack("<HQ", FSOM_VERSION, len(blob)) + blob)
    for _, arr in model.state_arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> VaeModel:
    head = 4 + struct.calcsize("<HQ")
    if len(data) < head or data[:4] != FSOM_MAGIC:
        raise FormatError("not an FSOM checkpoint (bad magic or short header)")
    version, length = struct.unpack_from("<HQ", data, 4)
    if version != FSOM_VERSION:
        raise FormatError(f"unsupported FSOM version {version}")
    off = head
    if off + length > len(data):
        raise FormatError("truncated FSOM checkpoint")
    try:
        config = VaeConfig.from_dict(json.loads(data[off:off + length].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise FormatError(f"unreadable FSOM config: {exc}") from None
    off += length
    model = init_model(config, rng=np.random.default_rng(0))
    for name, arr in model.state_arrays():
        count = arr.size
        if off + 8 * count > len(data):
            raise FormatError("truncated FSOM checkpoint")
        values = np.frombuffer(data, "<f8", count, off).astype(np.float64).reshape(arr.shape)
        layer, attr = name.split(".")
        setattr(model.layers[layer], attr, values)
        off += 8 * count
    if off != len(data):
        raise FormatError("trailing bytes after FSOM checkpoint")
    return model


def save_checkpoint(model: VaeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
