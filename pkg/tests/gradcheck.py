"""Central finite-difference gradient oracle shared by the test modules."""

import numpy as np

from photorank.corpus import PhotoFeatureTable
from photorank.models import ModelConfig, dropout_mask, init_params
from photorank.sampling import BinarySample, PairSample
from photorank.training import grad_binary, grad_pair_dot


def numerical_grads(loss_fn, params, h=1e-4):
    """Perturb every parameter entry and central-difference the loss."""
    grads = {}
    for name, tensor in params.tensors():
        grad = np.zeros_like(tensor)
        flat_t = tensor.ravel()
        flat_g = grad.ravel()
        for idx in range(flat_t.size):
            orig = flat_t[idx]
            flat_t[idx] = orig + h
            up = loss_fn()
            flat_t[idx] = orig - h
            down = loss_fn()
            flat_t[idx] = orig
            flat_g[idx] = (up - down) / (2.0 * h)
        grads[name] = grad
    return grads


def relative_error(analytic: dict, numeric: dict) -> float:
    """Norm of the gradient difference over the norm of the oracle gradient."""
    diff = 0.0
    ref = 0.0
    for name, num in numeric.items():
        diff += float(((analytic[name] - num) ** 2).sum())
        ref += float((num**2).sum())
    return np.sqrt(diff) / max(np.sqrt(ref), 1e-12)


def _random_features(rng, n_photos, dim):
    return PhotoFeatureTable(rng.normal(size=(n_photos, dim)).astype(np.float32))


def sweep_pair_gradients(n_configs=100, seed=42) -> float:
    """Worst relative error of brie/bpr gradients vs finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_configs):
        d = int(rng.integers(1, 9))
        feature_dim = int(rng.integers(2, 11))
        n_users = int(rng.integers(1, 6))
        features = _random_features(rng, 6, feature_dim)
        config = ModelConfig(kind="brie", d=d, feature_dim=feature_dim, seed=trial)
        params = init_params(config, n_users)
        pair = PairSample(int(rng.integers(n_users)), 0, int(rng.integers(6)), int(rng.integers(6)))
        masks = None
        if trial % 2:
            p = float(rng.choice([0.3, 0.6]))
            mask_rng = np.random.default_rng(trial)
            masks = tuple(dropout_mask(mask_rng, d, p) for _ in range(3))
        loss_fn = lambda: grad_pair_dot(params, pair, features, masks)[0]
        _, analytic = grad_pair_dot(params, pair, features, masks)
        worst = max(worst, relative_error(analytic, numerical_grads(loss_fn, params)))
    return worst


def sweep_mf_elvis_gradients(n_configs=100, seed=43) -> float:
    """Worst relative error of mf_elvis/bce gradients vs finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_configs):
        d = int(rng.integers(1, 9))
        feature_dim = int(rng.integers(2, 11))
        features = _random_features(rng, 6, feature_dim)
        config = ModelConfig(kind="mf_elvis", d=d, feature_dim=feature_dim, seed=trial)
        params = init_params(config, 4)
        sample = BinarySample(int(rng.integers(4)), 0, int(rng.integers(6)), int(rng.integers(2)))
        loss_fn = lambda: grad_binary(params, sample, features)[0]
        _, analytic = grad_binary(params, sample, features)
        worst = max(worst, relative_error(analytic, numerical_grads(loss_fn, params)))
    return worst


def sweep_elvis_gradients(n_configs=100, seed=44) -> float:
    """Worst relative error of elvis/bce gradients vs finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(n_configs):
        d = int(rng.integers(1, 9))
        feature_dim = int(rng.integers(2, 9))
        features = _random_features(rng, 5, feature_dim)
        config = ModelConfig(kind="elvis", d=d, feature_dim=feature_dim, mlp_hidden=(4,), seed=trial)
        params = init_params(config, 3)
        sample = BinarySample(int(rng.integers(3)), 0, int(rng.integers(5)), int(rng.integers(2)))
        masks = None
        if trial % 2:
            mask_rng = np.random.default_rng(1000 + trial)
            masks = [dropout_mask(mask_rng, 4, 0.25)]
        loss_fn = lambda: grad_binary(params, sample, features, masks)[0]
        _, analytic = grad_binary(params, sample, features, masks)
        worst = max(worst, relative_error(analytic, numerical_grads(loss_fn, params)))
    return worst
