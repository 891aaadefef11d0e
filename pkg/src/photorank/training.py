"""Losses, analytic gradients, Adam, and the epoch loop with early stopping.

Both losses are computed in stable softplus form, batch gradients are summed
(matching the summed training objectives) while the per-example mean is
logged, and every run is bitwise-reproducible from its seed: the sampler,
batch shuffles, and dropout masks each draw from a labeled sub-stream.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import evaluation, models, sampling
from .corpus import Corpus, SplitAssignment, VAL
from .models import ModelConfig, ModelParams, dropout_mask, init_params, sigmoid
from .sampling import BinarySample, PairSample, batch_stream
from .seeds import derive_seed

LOSS_KINDS = ("bpr", "bce")
_LOSS_FOR_KIND = {"brie": "bpr", "mf_elvis": "bce", "elvis": "bce"}


class TrainingError(RuntimeError):
    """Invalid training configuration or incompatible model/loss pairing."""


class TrainingDiverged(TrainingError):
    """The loss left the finite range; training aborts rather than skipping."""


def softplus(x):
    """log(1 + exp(x)) without overflow across the full float range."""
    arr = np.asarray(x, dtype=np.float64)
    return np.maximum(arr, 0.0) + np.log1p(np.exp(-np.abs(arr)))


def bpr_loss(pos_score, neg_score):
    """Pairwise ranking loss -log sigmoid(pos - neg), as softplus(neg - pos)."""
    return softplus(np.asarray(neg_score, dtype=np.float64) - np.asarray(pos_score, dtype=np.float64))


def bce_loss(logit, label):
    """Binary cross-entropy in logit space: softplus(logit) - label * logit."""
    return softplus(logit) - np.asarray(label, dtype=np.float64) * np.asarray(logit, dtype=np.float64)


# ---------------------------------------------------------------------------
# Analytic gradients.  The batched forms return (summed loss, grads keyed by
# tensor name); single-sample wrappers serve the unit contracts and the
# finite-difference checks.
# ---------------------------------------------------------------------------


def _zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(tensor) for name, tensor in params.tensors()}


def grad_pairs(
    params: ModelParams,
    users: np.ndarray,
    pos_photos: np.ndarray,
    neg_photos: np.ndarray,
    features,
    masks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed pairwise loss and gradients for a batch of (u, p, p_neg).

    With s = sigmoid(neg - pos) per pair, the user row receives
    s * mask_u * (v_neg - v_pos) and the projection accumulates the outer
    products of the masked user vectors with the raw pos/neg features,
    signed (-, +).  ``masks`` holds the scaled dropout masks (user, pos,
    neg); None means dropout off.
    """
    x_pos = features.rows[pos_photos].astype(np.float64)
    x_neg = features.rows[neg_photos].astype(np.float64)
    u_rows = params.user_table[users]
    v_pos = x_pos @ params.proj_weight + params.proj_bias
    v_neg = x_neg @ params.proj_weight + params.proj_bias
    if masks is not None:
        m_u, m_pos, m_neg = masks
        u_rows = u_rows * m_u
        v_pos = v_pos * m_pos
        v_neg = v_neg * m_neg
    else:
        m_pos = m_neg = 1.0
    s_pos = np.einsum("bd,bd->b", u_rows, v_pos)
    s_neg = np.einsum("bd,bd->b", u_rows, v_neg)
    loss = float(bpr_loss(s_pos, s_neg).sum())

    s = sigmoid(s_neg - s_pos)
    grads = _zero_grads(params)
    gu = s[:, None] * (v_neg - v_pos)
    if masks is not None:
        gu = gu * m_u
    np.add.at(grads["user_table"], users, gu)
    a_pos = s[:, None] * u_rows * m_pos
    a_neg = s[:, None] * u_rows * m_neg
    grads["proj_weight"] = x_neg.T @ a_neg - x_pos.T @ a_pos
    grads["proj_bias"] = a_neg.sum(axis=0) - a_pos.sum(axis=0)
    return loss, grads


def grad_pair_dot(
    params: ModelParams,
    pair: PairSample,
    features,
    masks: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Single-pair wrapper around :func:`grad_pairs` for the brie scorer."""
    if params.config.kind != "brie":
        raise TrainingError("pairwise gradients apply to the brie kind only")
    batched = None
    if masks is not None:
        batched = tuple(np.asarray(m, dtype=np.float64)[None, :] for m in masks)
    return grad_pairs(
        params,
        np.asarray([pair.user]),
        np.asarray([pair.photo_pos]),
        np.asarray([pair.photo_neg]),
        features,
        batched,
    )


def grad_binary_batch(
    params: ModelParams,
    users: np.ndarray,
    photos: np.ndarray,
    labels: np.ndarray,
    features,
    masks: list[np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Summed BCE loss and gradients for mf_elvis or elvis batches.

    The logit-space gradient sigmoid(logit) - label backpropagates through
    the dot product, or through the MLP (dense/ReLU chain, with ``masks``
    holding one scaled dropout mask per hidden layer in train mode).
    """
    kind = params.config.kind
    x = features.rows[photos].astype(np.float64)
    u_rows = params.user_table[users]
    v = x @ params.proj_weight + params.proj_bias
    labels = np.asarray(labels, dtype=np.float64)
    grads = _zero_grads(params)

    if kind == "mf_elvis":
        logits = np.einsum("bd,bd->b", u_rows, v)
        g = sigmoid(logits) - labels
        loss = float(bce_loss(logits, labels).sum())
        np.add.at(grads["user_table"], users, g[:, None] * v)
        coeff = g[:, None] * u_rows
        grads["proj_weight"] = x.T @ coeff
        grads["proj_bias"] = coeff.sum(axis=0)
        return loss, grads

    if kind != "elvis":
        raise TrainingError("binary gradients apply to mf_elvis or elvis kinds")

    h = np.concatenate([u_rows, v], axis=1)
    activations = [h]
    preacts = []
    n_hidden = len(params.mlp) - 1
    for layer in range(n_hidden):
        w, b = params.mlp[layer]
        a = h @ w + b
        h = np.maximum(a, 0.0)
        if masks is not None:
            h = h * masks[layer]
        preacts.append(a)
        activations.append(h)
    w_out, b_out = params.mlp[-1]
    logits = (h @ w_out + b_out)[:, 0]
    g = sigmoid(logits) - labels
    loss = float(bce_loss(logits, labels).sum())

    delta = g[:, None]
    grads[f"mlp_w{n_hidden}"] = activations[-1].T @ delta
    grads[f"mlp_b{n_hidden}"] = delta.sum(axis=0)
    back = delta @ w_out.T
    for layer in range(n_hidden - 1, -1, -1):
        if masks is not None:
            back = back * masks[layer]
        back = back * (preacts[layer] > 0.0)
        w, _ = params.mlp[layer]
        grads[f"mlp_w{layer}"] = activations[layer].T @ back
        grads[f"mlp_b{layer}"] = back.sum(axis=0)
        back = back @ w.T
    d = params.config.d
    np.add.at(grads["user_table"], users, back[:, :d])
    grads["proj_weight"] = x.T @ back[:, d:]
    grads["proj_bias"] = back[:, d:].sum(axis=0)
    return loss, grads


def grad_binary(
    params: ModelParams,
    sample: BinarySample,
    features,
    masks: list[np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Single-sample wrapper around :func:`grad_binary_batch`."""
    batched = None
    if masks is not None:
        batched = [np.asarray(m, dtype=np.float64)[None, :] for m in masks]
    return grad_binary_batch(
        params,
        np.asarray([sample.user]),
        np.asarray([sample.photo]),
        np.asarray([sample.label]),
        features,
        batched,
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """Per-tensor first/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t) for name, t in params.tensors()},
            v={name: np.zeros_like(t) for name, t in params.tensors()},
        )


def adam_step(state: AdamState, params: ModelParams, grads: dict[str, np.ndarray], lr: float) -> None:
    """One bias-corrected Adam update, applied to the tensors in place."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for name, tensor in params.tensors():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        tensor -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------


@dataclass
class EarlyStopConfig:
    patience: int = 5
    min_delta: float = 1e-3
    cap: int = 100

    def __post_init__(self):
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.min_delta < 0:
            raise TrainingError("min_delta must be >= 0")
        if self.cap < 1:
            raise TrainingError("epoch cap must be >= 1")


class EarlyStopper:
    """Stop once the monitored value stops improving by more than min_delta.

    Mode is max (higher is better).  Improvement resets the stale counter;
    ``update`` returns True when it reaches the patience.
    """

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        if value > self.best + self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class EpochStats:
    """Per-epoch bookkeeping, including the modeled energy footprint."""

    epoch: int
    mean_loss: float
    seconds: float
    cumulative_seconds: float
    val_mauc: float | None
    energy_j: float
    co2_g: float
    cumulative_energy_j: float
    cumulative_co2_g: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "mean_loss": self.mean_loss,
                "seconds": self.seconds,
                "cumulative_seconds": self.cumulative_seconds,
                "val_mauc": self.val_mauc,
                "energy_j": self.energy_j,
                "co2_g": self.co2_g,
                "cumulative_energy_j": self.cumulative_energy_j,
                "cumulative_co2_g": self.cumulative_co2_g,
            },
            sort_keys=True,
        )


def track_resources(seconds: float, power_watts: float, carbon_intensity: float) -> tuple[float, float]:
    """Energy (J) and CO2 (g) under a declared constant power model."""
    if power_watts < 0 or carbon_intensity < 0:
        raise TrainingError("power and carbon intensity must be >= 0")
    energy = seconds * power_watts
    return energy, energy * carbon_intensity


@dataclass
class TrainConfig:
    loss: str
    lr: float = 1e-3
    batch_size: int = 16384
    max_epochs: int = 15
    early_stop: EarlyStopConfig | None = None
    seed: int = 0
    power_watts: float = 65.0
    carbon_intensity: float = 1.32e-4  # g CO2 per joule (~475 g/kWh grid mix)

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise TrainingError(f"loss must be one of {LOSS_KINDS}, not {self.loss!r}")
        # lr 0 is allowed as a diagnostic: training then provably leaves init untouched.
        if self.lr < 0:
            raise TrainingError("lr must be >= 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise TrainingError("max_epochs must be >= 1")


def train(
    corpus: Corpus,
    split: SplitAssignment,
    model_config: ModelConfig,
    train_config: TrainConfig,
    monitor_fn: Callable[[ModelParams, int], float] | None = None,
    epoch_hook: Callable[[int, ModelParams, EpochStats], None] | None = None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Run the full optimization loop and return final params plus stats.

    The bpr loss resamples one negative per positive at every epoch; bce
    trains on the fixed 40x static expansion, reshuffling only batch order.
    With early stopping enabled the loop runs up to the cap, monitors
    validation MAUC (or ``monitor_fn``) each epoch, and restores the
    best-epoch parameters.  A non-finite loss aborts with diagnostics.
    """
    expected = _LOSS_FOR_KIND.get(model_config.kind)
    if expected is None:
        raise TrainingError(f"kind {model_config.kind!r} is not trainable")
    if train_config.loss != expected:
        raise TrainingError(
            f"loss {train_config.loss!r} is incompatible with model {model_config.kind!r}"
        )

    params = init_params(model_config, corpus.n_users)
    adam = AdamState.for_params(params)
    sampler_seed = derive_seed(train_config.seed, "sampler")
    mask_rng = np.random.default_rng(derive_seed(train_config.seed, "dropout"))
    use_masks = model_config.dropout_p > 0

    static_columns = None
    if train_config.loss == "bce":
        static = sampling.expand_static(corpus, split, sampler_seed)
        static_columns = np.asarray(static, dtype=np.int64)

    stopper = None
    val_cases = None
    if train_config.early_stop is not None:
        stopper = EarlyStopper(train_config.early_stop.patience, train_config.early_stop.min_delta)
        if monitor_fn is None:
            if split.indices(VAL).size == 0:
                raise TrainingError("early stopping needs a validation split")
            val_cases = evaluation.build_test_cases(corpus, split, subset=VAL)

    n_epochs = train_config.early_stop.cap if stopper else train_config.max_epochs
    stats: list[EpochStats] = []
    best_params: ModelParams | None = None
    cum_seconds = cum_energy = cum_co2 = 0.0

    for epoch in range(1, n_epochs + 1):
        t0 = time.perf_counter()
        if train_config.loss == "bpr":
            pairs = sampling.sample_pairwise_epoch(corpus, split, epoch, sampler_seed)
            columns = np.asarray(pairs, dtype=np.int64)
        else:
            columns = static_columns
        n_examples = len(columns)

        loss_total = 0.0
        shuffle_seed = derive_seed(train_config.seed, "shuffle", epoch)
        for batch_idx, idx in enumerate(batch_stream(np.arange(n_examples), train_config.batch_size, shuffle_seed)):
            if train_config.loss == "bpr":
                users, _, pos, neg = (columns[idx, c] for c in range(4))
                masks = None
                if use_masks:
                    shape = (len(idx), model_config.d)
                    masks = tuple(
                        dropout_mask(mask_rng, shape, model_config.dropout_p) for _ in range(3)
                    )
                loss, grads = grad_pairs(params, users, pos, neg, corpus.features, masks)
            else:
                users, _, photos, labels = (columns[idx, c] for c in range(4))
                masks = None
                if use_masks and model_config.kind == "elvis":
                    masks = [
                        dropout_mask(mask_rng, (len(idx), width), model_config.dropout_p)
                        for width in model_config.mlp_hidden
                    ]
                loss, grads = grad_binary_batch(params, users, photos, labels, corpus.features, masks)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx} "
                    f"(batch size {len(idx)}, lr {train_config.lr})"
                )
            adam_step(adam, params, grads, train_config.lr)
            loss_total += loss

        seconds = time.perf_counter() - t0
        energy, co2 = track_resources(seconds, train_config.power_watts, train_config.carbon_intensity)
        cum_seconds += seconds
        cum_energy += energy
        cum_co2 += co2

        val_value = None
        if stopper is not None:
            if monitor_fn is not None:
                val_value = float(monitor_fn(params, epoch))
            else:
                scorer = models.make_scorer(model_config.kind, params=params, corpus=corpus)
                val_value = evaluation.aggregate(val_cases, scorer).mauc
                if val_value is None:
                    raise TrainingError(
                        "validation MAUC is undefined (every validation case is single-candidate)"
                    )
        entry = EpochStats(
            epoch=epoch,
            mean_loss=loss_total / n_examples,
            seconds=seconds,
            cumulative_seconds=cum_seconds,
            val_mauc=val_value,
            energy_j=energy,
            co2_g=co2,
            cumulative_energy_j=cum_energy,
            cumulative_co2_g=cum_co2,
        )
        stats.append(entry)
        if epoch_hook is not None:
            epoch_hook(epoch, params, entry)
        if stopper is not None:
            stop = stopper.update(epoch, val_value)
            if stopper.best_epoch == epoch:
                best_params = params.copy()
            if stop:
                break

    if stopper is not None and best_params is not None:
        params = best_params
    return params, stats
