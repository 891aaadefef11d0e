"""Corpus loading, validation, partitioning, and synthetic generation.

A corpus is a list of (user, item, photo) authorship triads plus one
precomputed feature vector per photo.  Each photo belongs to exactly one
triad, so the number of interactions, the number of photos, and the number
of feature rows all coincide.  Raw platform IDs are densified to 0-based
indices in first-seen order; the ID maps are retained so reports can name
the original entities.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np


class CorpusError(ValueError):
    """Malformed corpus file or inconsistent corpus data."""


class Interaction(NamedTuple):
    """One (user, item, photo) authorship triad, all dense 0-based indices."""

    user: int
    item: int
    photo: int


# Split labels. The file format spells them out; in memory they are codes.
TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")
_SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}

TRIAD_HEADER = "user_id\titem_id\tphoto_id"
SPLIT_HEADER = "row_index\tsplit"
FEATURE_MAGIC = b"PFV1"


class PhotoFeatureTable:
    """Immutable table of per-photo feature vectors; row r belongs to photo r.

    Values are stored as 32-bit floats exactly as ingested (no normalization);
    numerical consumers upcast to 64-bit floats for accumulation.
    """

    def __init__(self, rows: np.ndarray):
        rows = np.ascontiguousarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise CorpusError("feature table must be two-dimensional")
        bad = ~np.isfinite(rows)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise CorpusError(f"non-finite feature value at row {r}, column {c}")
        self.rows = rows
        self.rows.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def row(self, photo: int) -> np.ndarray:
        return self.rows[photo]


@dataclass
class TriadIngest:
    """Densified triads plus the dense-index -> raw-ID maps kept for reporting."""

    interactions: list[Interaction]
    user_ids: list[str]
    item_ids: list[str]
    photo_ids: list[str]


def ingest_interactions(path) -> TriadIngest:
    """Read a triad TSV and densify its string IDs in first-seen order.

    Rejects files with a wrong header, rows with a column count other than
    three, non-UTF-8 bytes, duplicate photo IDs, and files without data rows.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except UnicodeDecodeError as exc:
        raise CorpusError(f"triad file is not valid UTF-8: {exc}") from None
    if not lines or lines[0] != TRIAD_HEADER:
        raise CorpusError(f"triad file must start with header {TRIAD_HEADER!r}")

    users: dict[str, int] = {}
    items: dict[str, int] = {}
    photos: dict[str, int] = {}
    interactions: list[Interaction] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"line {lineno}: expected 3 columns, found {len(parts)}")
        raw_u, raw_i, raw_p = parts
        if raw_p in photos:
            raise CorpusError(f"line {lineno}: duplicate photo ID {raw_p!r}")
        u = users.setdefault(raw_u, len(users))
        i = items.setdefault(raw_i, len(items))
        p = photos.setdefault(raw_p, len(photos))
        interactions.append(Interaction(u, i, p))
    if not interactions:
        raise CorpusError("triad file has no data rows")
    return TriadIngest(interactions, list(users), list(items), list(photos))


def write_triads(path, interactions: Sequence[Interaction], ids: TriadIngest | None = None) -> None:
    """Write a triad TSV; without retained ID maps, indices get u/i/p prefixes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRIAD_HEADER + "\n")
        for t in interactions:
            if ids is not None:
                fh.write(f"{ids.user_ids[t.user]}\t{ids.item_ids[t.item]}\t{ids.photo_ids[t.photo]}\n")
            else:
                fh.write(f"u{t.user}\ti{t.item}\tp{t.photo}\n")


def ingest_features(path, photo_ids: Sequence[str] | None = None) -> PhotoFeatureTable:
    """Read a feature file, binary (magic ``PFV1``) or TSV fallback.

    Binary layout: magic, u32 count, u32 dim, then count*dim little-endian
    32-bit floats row-major; row r is the vector of dense photo index r.
    The TSV fallback carries a photo_id column; rows are reordered through
    ``photo_ids`` (dense index -> raw ID) when given, otherwise file order
    is taken as dense order.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(FEATURE_MAGIC)] == FEATURE_MAGIC:
        return _parse_binary_features(blob)
    return _parse_tsv_features(blob, photo_ids)


def _parse_binary_features(blob: bytes) -> PhotoFeatureTable:
    header_end = len(FEATURE_MAGIC) + 8
    if len(blob) < header_end:
        raise CorpusError("feature file truncated before header")
    count, dim = struct.unpack_from("<II", blob, len(FEATURE_MAGIC))
    payload = blob[header_end:]
    expected = count * dim * 4
    if len(payload) != expected:
        raise CorpusError(
            f"feature payload holds {len(payload)} bytes, header declares {expected}"
        )
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return PhotoFeatureTable(rows)


def _parse_tsv_features(blob: bytes, photo_ids: Sequence[str] | None) -> PhotoFeatureTable:
    try:
        lines = blob.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        raise CorpusError("feature file has neither the PFV1 magic nor UTF-8 text") from None
    if not lines or not lines[0].startswith("photo_id"):
        raise CorpusError("feature TSV must start with a photo_id header column")
    dim = len(lines[0].split("\t")) - 1
    if dim < 1:
        raise CorpusError("feature TSV header declares no feature columns")
    raw: dict[str, np.ndarray] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != dim + 1:
            raise CorpusError(f"line {lineno}: expected {dim + 1} columns, found {len(parts)}")
        if parts[0] in raw:
            raise CorpusError(f"line {lineno}: duplicate photo ID {parts[0]!r}")
        try:
            raw[parts[0]] = np.asarray([float(v) for v in parts[1:]], dtype=np.float32)
        except ValueError:
            raise CorpusError(f"line {lineno}: non-numeric feature value") from None
        order.append(parts[0])
    if not raw:
        raise CorpusError("feature TSV has no data rows")
    if photo_ids is None:
        rows = np.stack([raw[pid] for pid in order])
    else:
        missing = [pid for pid in photo_ids if pid not in raw]
        if missing:
            raise CorpusError(f"feature TSV misses photo ID {missing[0]!r}")
        rows = np.stack([raw[pid] for pid in photo_ids])
    return PhotoFeatureTable(rows)


def write_features(path, table: PhotoFeatureTable) -> None:
    """Write the binary feature format (magic, count, dim, f32 rows)."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", len(table), table.dim))
        fh.write(table.rows.astype("<f4").tobytes())


class Corpus:
    """Immutable indexed view of a triad corpus with per-photo features.

    Besides the raw triads, it serves the inverse maps everything else
    needs: photos per user, photos per item, and the single author/item of
    each photo.  Safe for unlimited concurrent readers once built.
    """

    def __init__(
        self,
        interactions: Sequence[Interaction],
        features: PhotoFeatureTable,
        n_users: int | None = None,
        n_items: int | None = None,
        ids: TriadIngest | None = None,
    ):
        if not interactions:
            raise CorpusError("corpus must contain at least one interaction")
        triads = np.asarray(interactions, dtype=np.int64)
        if triads.min() < 0:
            raise CorpusError("negative index in interactions")
        self.users = triads[:, 0]
        self.items = triads[:, 1]
        self.photos = triads[:, 2]
        n = len(interactions)
        if len(features) != n:
            raise CorpusError(
                f"{n} interactions but {len(features)} feature rows; each photo needs exactly one"
            )
        counts = np.bincount(self.photos, minlength=n)
        if self.photos.max() >= n or (counts != 1).any():
            raise CorpusError("photo indices must cover 0..n-1 exactly once")

        self.n_users = int(n_users) if n_users is not None else int(self.users.max()) + 1
        self.n_items = int(n_items) if n_items is not None else int(self.items.max()) + 1
        if self.users.max() >= self.n_users or self.items.max() >= self.n_items:
            raise CorpusError("index exceeds declared cardinality")

        self.interactions = [Interaction(*map(int, row)) for row in triads]
        self.features = features
        self.ids = ids

        self.photo_author = np.empty(n, dtype=np.int64)
        self.photo_item = np.empty(n, dtype=np.int64)
        self.photo_author[self.photos] = self.users
        self.photo_item[self.photos] = self.items
        self.user_photos = _group(self.photos, self.users, self.n_users)
        self.item_photos = _group(self.photos, self.items, self.n_items)
        self.user_rows = _group(np.arange(n), self.users, self.n_users)

    @property
    def n_photos(self) -> int:
        return len(self.photos)

    def __len__(self) -> int:
        return len(self.photos)


def _group(values: np.ndarray, keys: np.ndarray, n_keys: int) -> list[np.ndarray]:
    """Bucket values by key, preserving interaction order inside each bucket."""
    buckets: list[list[int]] = [[] for _ in range(n_keys)]
    for value, key in zip(values.tolist(), keys.tolist()):
        buckets[key].append(value)
    return [np.asarray(b, dtype=np.int64) for b in buckets]


def build_corpus(
    interactions: Sequence[Interaction],
    features: PhotoFeatureTable,
    n_users: int | None = None,
    n_items: int | None = None,
    ids: TriadIngest | None = None,
) -> Corpus:
    """Assemble a validated corpus; rejects degenerate (empty) inputs."""
    return Corpus(interactions, features, n_users=n_users, n_items=n_items, ids=ids)


class SplitAssignment:
    """One train/val/test label per interaction row.

    Guarantees the no-cold-start rule: every user with a val or test row
    keeps at least one train row.
    """

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.uint8)
        if labels.ndim != 1 or labels.size == 0:
            raise CorpusError("split labels must be a non-empty vector")
        if labels.max(initial=0) > TEST:
            raise CorpusError("split labels must be train/val/test")
        self.labels = labels
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, label: int) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]

    def counts(self) -> tuple[int, int, int]:
        c = np.bincount(self.labels, minlength=3)
        return int(c[TRAIN]), int(c[VAL]), int(c[TEST])

    def fractions(self) -> tuple[float, float, float]:
        """Achieved fractions, which can differ from the requested targets."""
        c = self.counts()
        n = len(self.labels)
        return tuple(v / n for v in c)


def partition(corpus: Corpus, val_frac: float = 0.1, test_frac: float = 0.2, seed: int = 0) -> SplitAssignment:
    """Per-user stratified split keeping every evaluated user in train.

    Each user's rows are shuffled with the seeded RNG; single-interaction
    users stay fully in train, others round val/test counts half-up toward
    the targets and keep at least one train row (val shrinks before test
    when the rounded counts would empty train).
    """
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise CorpusError("need val_frac, test_frac >= 0 and val_frac + test_frac < 1")
    rng = np.random.default_rng(seed)
    labels = np.full(len(corpus), TRAIN, dtype=np.uint8)
    for rows in corpus.user_rows:
        n_u = rows.size
        if n_u <= 1:
            continue
        n_val = int(math.floor(n_u * val_frac + 0.5))
        n_test = int(math.floor(n_u * test_frac + 0.5))
        spill = n_val + n_test - (n_u - 1)
        if spill > 0:
            cut = min(n_val, spill)
            n_val -= cut
            n_test -= spill - cut
        order = rows[rng.permutation(n_u)]
        labels[order[:n_val]] = VAL
        labels[order[n_val : n_val + n_test]] = TEST
    return SplitAssignment(labels)


def write_split(path, split: SplitAssignment) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SPLIT_HEADER + "\n")
        for row, code in enumerate(split.labels.tolist()):
            fh.write(f"{row}\t{SPLIT_NAMES[code]}\n")


def read_split(path, n_interactions: int) -> SplitAssignment:
    """Read a split TSV; every row index 0..n-1 must appear exactly once."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SPLIT_HEADER:
        raise CorpusError(f"split file must start with header {SPLIT_HEADER!r}")
    labels = np.full(n_interactions, 255, dtype=np.uint8)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CorpusError(f"line {lineno}: expected 2 columns, found {len(parts)}")
        try:
            row = int(parts[0])
        except ValueError:
            raise CorpusError(f"line {lineno}: row index is not an integer") from None
        if parts[1] not in _SPLIT_CODES:
            raise CorpusError(f"line {lineno}: unknown split label {parts[1]!r}")
        if not 0 <= row < n_interactions:
            raise CorpusError(f"line {lineno}: row index {row} out of range")
        if labels[row] != 255:
            raise CorpusError(f"line {lineno}: duplicate row index {row}")
        labels[row] = _SPLIT_CODES[parts[1]]
    if (labels == 255).any():
        missing = int(np.nonzero(labels == 255)[0][0])
        raise CorpusError(f"split file misses row index {missing}")
    return SplitAssignment(labels)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-factor corpus, a desk-scale stand-in for real data.

    Every user gets a latent style vector; each photo perturbs its author's
    style by ``style_noise`` and is observed through a fixed random linear
    map into ``feature_dim`` dimensions plus ``feature_noise``.
    """

    n_users: int
    n_items: int
    n_photos: int
    true_dim: int
    feature_dim: int
    style_noise: float = 0.3
    feature_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_photos, self.true_dim) < 1:
            raise CorpusError("all synthetic counts must be >= 1")
        if self.true_dim > self.feature_dim:
            raise CorpusError("true_dim must not exceed feature_dim")
        if self.style_noise < 0 or self.feature_noise < 0:
            raise CorpusError("noise levels must be >= 0")


def generate_synthetic(
    spec: SyntheticSpec, val_frac: float = 0.1, test_frac: float = 0.2
) -> tuple[Corpus, SplitAssignment]:
    """Generate a corpus from a planted model, bitwise-reproducible per seed.

    Draw order is fixed (mixing matrix, user styles, authors, items, photo
    latents, observation noise) so identical specs yield identical corpora;
    the partition reuses ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    mixing = rng.normal(size=(spec.feature_dim, spec.true_dim))
    styles = rng.normal(size=(spec.n_users, spec.true_dim))
    authors = rng.integers(0, spec.n_users, size=spec.n_photos)
    items = rng.integers(0, spec.n_items, size=spec.n_photos)
    latents = styles[authors] + spec.style_noise * rng.normal(size=(spec.n_photos, spec.true_dim))
    feats = latents @ mixing.T + spec.feature_noise * rng.normal(size=(spec.n_photos, spec.feature_dim))
    interactions = [
        Interaction(int(u), int(i), p) for p, (u, i) in enumerate(zip(authors.tolist(), items.tolist()))
    ]
    corpus = Corpus(
        interactions,
        PhotoFeatureTable(feats.astype(np.float32)),
        n_users=spec.n_users,
        n_items=spec.n_items,
    )
    split = partition(corpus, val_frac, test_frac, seed=spec.seed)
    return corpus, split
