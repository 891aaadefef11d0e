"""Parameter containers, initialization, and the five authorship scorers.

The learned scorers share a user embedding table and an affine projection of
raw photo features into the latent space.  ``brie`` scores with a raw dot
product (dropout-masked embeddings while training), ``mf_elvis`` with a
sigmoid of the dot product, and ``elvis`` with a sigmoid-capped MLP over the
concatenated embeddings.  ``cnt`` and ``rnd`` are the untrained baselines.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .corpus import Corpus, SplitAssignment, TRAIN

LEARNED_KINDS = ("brie", "mf_elvis", "elvis")
BASELINE_KINDS = ("cnt", "rnd")
KINDS = LEARNED_KINDS + BASELINE_KINDS

ARTIFACT_MAGIC = b"BRIEM1"
_KIND_CODES = {kind: code for code, kind in enumerate(LEARNED_KINDS)}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}

# Finite stand-in for "ranks last, always"; keeps downstream ranking total.
FLOOR_SCORE = float(-np.finfo(np.float64).max)


class ModelError(ValueError):
    """Invalid model configuration or parameter state."""


def sigmoid(x):
    """Numerically stable logistic function for scalars and arrays."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out


@dataclass
class ModelConfig:
    kind: str
    d: int = 64
    feature_dim: int = 1536
    dropout_p: float = 0.0
    mlp_hidden: tuple[int, ...] | None = None
    seed: int = 0
    xavier_normal: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in LEARNED_KINDS and self.d < 1:
            raise ModelError("latent dimension d must be >= 1")
        if self.feature_dim < 1:
            raise ModelError("feature_dim must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ModelError("dropout_p must lie in [0, 1)")
        if self.dropout_p > 0 and self.kind not in ("brie", "elvis"):
            raise ModelError(f"kind {self.kind!r} has no dropout path")
        if self.kind == "elvis":
            if self.mlp_hidden is None:
                self.mlp_hidden = (self.d, max(self.d // 2, 1))
            else:
                self.mlp_hidden = tuple(int(w) for w in self.mlp_hidden)
                if any(w < 1 for w in self.mlp_hidden):
                    raise ModelError("MLP hidden widths must be >= 1")
        elif self.mlp_hidden is not None:
            raise ModelError(f"mlp_hidden only applies to the elvis kind, not {self.kind!r}")

    def mlp_widths(self) -> list[int]:
        """Dense layer sizes [2d, hidden..., 1] of the elvis similarity MLP."""
        if self.kind != "elvis":
            return []
        return [2 * self.d, *self.mlp_hidden, 1]


@dataclass
class ModelParams:
    """Trainable tensors, float64 in memory, serialized as float32."""

    config: ModelConfig
    n_users: int
    user_table: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    mlp: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Named tensors in their fixed serialization order."""
        yield "user_table", self.user_table
        yield "proj_weight", self.proj_weight
        yield "proj_bias", self.proj_bias
        for layer, (w, b) in enumerate(self.mlp):
            yield f"mlp_w{layer}", w
            yield f"mlp_b{layer}", b

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            n_users=self.n_users,
            user_table=self.user_table.copy(),
            proj_weight=self.proj_weight.copy(),
            proj_bias=self.proj_bias.copy(),
            mlp=[(w.copy(), b.copy()) for w, b in self.mlp],
        )


def init_params(config: ModelConfig, n_users: int) -> ModelParams:
    """Draw Xavier-initialized parameters, deterministic per config seed.

    Weight matrices use the uniform law on +-sqrt(6 / (fan_in + fan_out))
    (or the normal variant when ``xavier_normal`` is set); biases start at
    zero.  Draw order is user table, projection, then MLP layers.
    """
    if config.kind not in LEARNED_KINDS:
        raise ModelError(f"kind {config.kind!r} has no trainable parameters")
    if n_users < 1:
        raise ModelError("n_users must be >= 1")
    rng = np.random.default_rng(config.seed)

    def xavier(fan_in: int, fan_out: int) -> np.ndarray:
        if config.xavier_normal:
            std = math.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, std, size=(fan_in, fan_out))
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    user_table = xavier(n_users, config.d)
    proj_weight = xavier(config.feature_dim, config.d)
    proj_bias = np.zeros(config.d)
    mlp = []
    widths = config.mlp_widths()
    for n_in, n_out in zip(widths, widths[1:]):
        mlp.append((xavier(n_in, n_out), np.zeros(n_out)))
    return ModelParams(config, int(n_users), user_table, proj_weight, proj_bias, mlp)


def project_photo(params: ModelParams, feature_vector: np.ndarray) -> np.ndarray:
    """Affine map of raw features into the latent space; no activation.

    Accepts one vector or a (n, feature_dim) batch.
    """
    x = np.asarray(feature_vector, dtype=np.float64)
    if x.shape[-1] != params.config.feature_dim:
        raise ModelError(
            f"feature length {x.shape[-1]} does not match feature_dim {params.config.feature_dim}"
        )
    return x @ params.proj_weight + params.proj_bias


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def _check_mode(mode: str, p: float, mask_rng) -> None:
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', not {mode!r}")
    if mode == "train" and p > 0 and mask_rng is None:
        raise ModelError("train mode with dropout requires a mask RNG")


def score_brie(
    params: ModelParams,
    user: int,
    feature_vector: np.ndarray,
    mode: str = "eval",
    mask_rng: np.random.Generator | None = None,
) -> float:
    """Raw dot product of the user embedding and the projected photo.

    In train mode both embeddings receive independent inverted-dropout masks;
    eval mode is the exact dot product, so dropout never touches inference.
    """
    p = params.config.dropout_p
    _check_mode(mode, p, mask_rng)
    u_vec = params.user_table[user]
    v_vec = project_photo(params, feature_vector)
    if mode == "train" and p > 0:
        u_vec = u_vec * dropout_mask(mask_rng, u_vec.shape, p)
        v_vec = v_vec * dropout_mask(mask_rng, v_vec.shape, p)
    return float(u_vec @ v_vec)


def score_mf_elvis(params: ModelParams, user: int, feature_vector: np.ndarray) -> float:
    """Sigmoid of the user-photo dot product (training consumes the logit)."""
    return sigmoid(mf_elvis_logit(params, user, feature_vector))


def mf_elvis_logit(params: ModelParams, user: int, feature_vector: np.ndarray) -> float:
    return float(params.user_table[user] @ project_photo(params, feature_vector))


def score_elvis(
    params: ModelParams,
    user: int,
    feature_vector: np.ndarray,
    mode: str = "eval",
    mask_rng: np.random.Generator | None = None,
) -> float:
    """Sigmoid-capped MLP over the concatenated user and photo embeddings.

    Hidden layers apply dense -> ReLU -> (train-mode dropout); the final
    dense layer emits one logit.
    """
    p = params.config.dropout_p
    _check_mode(mode, p, mask_rng)
    h = np.concatenate([params.user_table[user], project_photo(params, feature_vector)])
    for w, b in params.mlp[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        if mode == "train" and p > 0:
            h = h * dropout_mask(mask_rng, h.shape, p)
    w, b = params.mlp[-1]
    return sigmoid((h @ w + b)[0])


def score_cnt(corpus: Corpus, split: SplitAssignment, user: int, feature_vector: np.ndarray) -> float:
    """Negative distance between a photo and the user's train-photo centroid.

    Users with no train photos get the most negative finite score so they
    rank last deterministically.
    """
    rows = corpus.user_rows[user]
    rows = rows[split.labels[rows] == TRAIN]
    if rows.size == 0:
        return FLOOR_SCORE
    feats = corpus.features.rows[corpus.photos[rows]].astype(np.float64)
    centroid = feats.mean(axis=0)
    delta = np.asarray(feature_vector, dtype=np.float64) - centroid
    return float(-np.sqrt(delta @ delta))


def score_rnd(rng: np.random.Generator) -> float:
    """Uniform score on [0, 1) from the supplied stream."""
    return float(rng.random())


def count_params(config: ModelConfig, n_users: int) -> int:
    """Exact trainable parameter count; the baselines learn nothing."""
    if config.kind in BASELINE_KINDS:
        return 0
    total = n_users * config.d + config.feature_dim * config.d + config.d
    widths = config.mlp_widths()
    for n_in, n_out in zip(widths, widths[1:]):
        total += n_in * n_out + n_out
    return total


# ---------------------------------------------------------------------------
# Batch scorers used by the evaluation protocol: scorer(user, photo_indices)
# returns one score per candidate photo.
# ---------------------------------------------------------------------------

Scorer = Callable[[int, np.ndarray], np.ndarray]


class DotScorer:
    """Eval-mode brie: raw dot products against projected candidate photos."""

    def __init__(self, params: ModelParams, features):
        self.params = params
        self.features = features

    def __call__(self, user: int, photos: np.ndarray) -> np.ndarray:
        v = project_photo(self.params, self.features.rows[photos])
        return v @ self.params.user_table[user]


class SigmoidDotScorer(DotScorer):
    """mf_elvis: sigmoid of the dot product."""

    def __call__(self, user: int, photos: np.ndarray) -> np.ndarray:
        return sigmoid(super().__call__(user, photos))


class MlpScorer:
    """elvis in eval mode (dropout off)."""

    def __init__(self, params: ModelParams, features):
        self.params = params
        self.features = features

    def __call__(self, user: int, photos: np.ndarray) -> np.ndarray:
        v = project_photo(self.params, self.features.rows[photos])
        u = np.broadcast_to(self.params.user_table[user], v.shape)
        h = np.concatenate([u, v], axis=1)
        for w, b in self.params.mlp[:-1]:
            h = np.maximum(h @ w + b, 0.0)
        w, b = self.params.mlp[-1]
        return sigmoid((h @ w + b)[:, 0])


class CentroidScorer:
    """cnt baseline with per-user centroids precomputed from the train split."""

    def __init__(self, corpus: Corpus, split: SplitAssignment):
        train_rows = split.indices(TRAIN)
        users = corpus.users[train_rows]
        feats = corpus.features.rows[corpus.photos[train_rows]].astype(np.float64)
        sums = np.zeros((corpus.n_users, corpus.features.dim))
        np.add.at(sums, users, feats)
        counts = np.bincount(users, minlength=corpus.n_users).astype(np.float64)
        self.has_centroid = counts > 0
        counts[~self.has_centroid] = 1.0
        self.centroids = sums / counts[:, None]
        self.features = corpus.features

    def __call__(self, user: int, photos: np.ndarray) -> np.ndarray:
        if not self.has_centroid[user]:
            return np.full(len(photos), FLOOR_SCORE)
        delta = self.features.rows[photos].astype(np.float64) - self.centroids[user]
        return -np.sqrt(np.einsum("nd,nd->n", delta, delta))


class RandomScorer:
    """rnd baseline: a seeded uniform stream, one draw per candidate."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def __call__(self, user: int, photos: np.ndarray) -> np.ndarray:
        return self._rng.random(len(photos))


def make_scorer(
    kind: str,
    params: ModelParams | None = None,
    corpus: Corpus | None = None,
    split: SplitAssignment | None = None,
    seed: int = 0,
) -> Scorer:
    """Build the batch scorer for a model kind.

    Learned kinds need trained ``params`` plus the corpus (for features);
    ``cnt`` needs corpus and split; ``rnd`` needs only a seed.
    """
    if kind in LEARNED_KINDS:
        if params is None or corpus is None:
            raise ModelError(f"{kind} scorer needs params and a corpus")
        cls = {"brie": DotScorer, "mf_elvis": SigmoidDotScorer, "elvis": MlpScorer}[kind]
        return cls(params, corpus.features)
    if kind == "cnt":
        if corpus is None or split is None:
            raise ModelError("cnt scorer needs a corpus and a split")
        return CentroidScorer(corpus, split)
    if kind == "rnd":
        return RandomScorer(seed)
    raise ModelError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# Model artifact file: magic, config block, n_users, then the tensors as
# little-endian float32 in ``ModelParams.tensors()`` order.
# ---------------------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    cfg = params.config
    if cfg.kind not in LEARNED_KINDS:
        raise ModelError(f"kind {cfg.kind!r} has no artifact representation")
    with open(path, "wb") as fh:
        fh.write(ARTIFACT_MAGIC)
        fh.write(struct.pack("<BIId", _KIND_CODES[cfg.kind], cfg.d, cfg.feature_dim, cfg.dropout_p))
        hidden = cfg.mlp_hidden or ()
        fh.write(struct.pack("<I", len(hidden)))
        for width in hidden:
            fh.write(struct.pack("<I", width))
        fh.write(struct.pack("<QBI", cfg.seed, int(cfg.xavier_normal), params.n_users))
        for _, tensor in params.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_params(path) -> ModelParams:
    """Read an artifact; save(load(path)) reproduces the file bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
        raise ModelError("bad model artifact magic")
    offset = len(ARTIFACT_MAGIC)
    code, d, feature_dim, dropout_p = struct.unpack_from("<BIId", blob, offset)
    offset += struct.calcsize("<BIId")
    if code not in _CODE_KINDS:
        raise ModelError(f"unknown model kind code {code}")
    (n_hidden,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    hidden = struct.unpack_from(f"<{n_hidden}I", blob, offset) if n_hidden else ()
    offset += 4 * n_hidden
    seed, xavier_normal, n_users = struct.unpack_from("<QBI", blob, offset)
    offset += struct.calcsize("<QBI")

    kind = _CODE_KINDS[code]
    config = ModelConfig(
        kind=kind,
        d=d,
        feature_dim=feature_dim,
        dropout_p=dropout_p,
        mlp_hidden=hidden if kind == "elvis" else None,
        seed=seed,
        xavier_normal=bool(xavier_normal),
    )

    def take(shape) -> np.ndarray:
        nonlocal offset
        size = int(np.prod(shape)) * 4
        if offset + size > len(blob):
            raise ModelError("model artifact truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        offset += size
        return arr.reshape(shape).astype(np.float64)

    user_table = take((n_users, d))
    proj_weight = take((feature_dim, d))
    proj_bias = take((d,))
    mlp = []
    widths = config.mlp_widths()
    for n_in, n_out in zip(widths, widths[1:]):
        mlp.append((take((n_in, n_out)), take((n_out,))))
    if offset != len(blob):
        raise ModelError("model artifact has trailing bytes")
    return ModelParams(config, n_users, user_table, proj_weight, proj_bias, mlp)
