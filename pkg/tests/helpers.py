"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from flatsomatic import data
from flatsomatic.kernels import finite_diff_check
from flatsomatic.vae import VaeConfig, init_model, sample_noise, total_loss


def toy_gradient_check(trial: int, loss_kind: str, beta: float = 0.7):
    """Worst relative error of total_loss gradients on one random toy model.

    The analytic gradient is the float64 one the optimizer uses. The
    numeric side is evaluated in extended precision so that its
    round-off stays far below the tolerance even for tiny gradients.
    """
    rng = np.random.default_rng(trial)
    m = int(rng.integers(2, 11))
    h1, h2, g1, g2 = (int(v) for v in rng.integers(1, 9, 4))
    d = int(rng.integers(1, 5))
    cfg = VaeConfig(input_dim=m, encoder_units=(h1, h2), decoder_units=(g1, g2), latent_dim=d,
                    loss_kind=loss_kind, dropout_rate=0.2, l1_coeff=1e-3, seed=trial)
    model = init_model(cfg)
    for _, a in model.parameters():
        a += rng.normal(0, 0.1, a.shape)
    batch = int(rng.integers(4, 9))
    x = (rng.random((batch, m)) < 0.4).astype(float)
    noise = sample_noise(model, batch, rng)
    res = total_loss(model, x, noise=noise, beta=beta)
    ext = model.astype(np.longdouble)
    xl = x.astype(np.longdouble)
    params = [a for _, a in ext.parameters()]
    report = finite_diff_check(lambda: total_loss(ext, xl, noise=noise, beta=beta).value,
                               params, res.grads, epsilon=1e-5)
    return report


def planted_matrix(**overrides):
    """Planted-cluster dataset and its matrix under the default frequency filter."""
    ds = data.synth_generate(**overrides)
    vocab = data.build_vocabulary(ds.profiles)
    return ds, data.build_matrix(ds.profiles, vocab)


def brute_force_inertia(X: np.ndarray, k: int) -> float:
    """Minimum within-cluster sum of squares over every labelling into at most k groups."""
    import itertools

    best = np.inf
    for labels in itertools.product(range(k), repeat=len(X)):
        labels = np.asarray(labels)
        sse = sum(((X[labels == j] - X[labels == j].mean(0)) ** 2).sum()
                  for j in range(k) if np.any(labels == j))
        best = min(best, sse)
    return float(best)
