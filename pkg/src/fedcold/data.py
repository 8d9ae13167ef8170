"""Interaction datasets: loading, splitting, negative sampling, synthetic generation.

Interaction files are CSV with rows ``user_id,item_id`` and an optional third
``timestamp`` column. Ids of any textual form are densified to ``0..n-1`` in
first-appearance order and the mapping is persisted next to the dataset as two
id-map files with rows ``original_id,dense_id``.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .numerics import stream_rng

log = logging.getLogger(__name__)

DEFAULT_SPLIT_RATIOS = (0.6, 0.1, 0.3)


@dataclass
class Dataset:
    """Deduplicated user/item interactions over dense ids."""

    n_users: int
    n_items: int
    interactions: list[tuple[int, int]]
    timestamps: list[float] | None = None
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    _by_user: dict[int, set[int]] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(self.n_users)]
        if not self.item_ids:
            self.item_ids = [str(i) for i in range(self.n_items)]

    def by_user(self) -> dict[int, set[int]]:
        """Item set per user, computed once and cached."""
        if self._by_user is None:
            index: dict[int, set[int]] = {u: set() for u in range(self.n_users)}
            for u, i in self.interactions:
                index[u].add(i)
            self._by_user = index
        return self._by_user


@dataclass
class SplitDataset:
    """Item-based warm/validation/cold split of a dataset."""

    dataset: Dataset
    warm_items: list[int]
    val_items: list[int]
    cold_items: list[int]
    train_interactions: list[tuple[int, int]]
    val_interactions: list[tuple[int, int]]
    test_interactions: list[tuple[int, int]]

    def test_items_by_user(self) -> dict[int, set[int]]:
        index: dict[int, set[int]] = {}
        for u, i in self.test_interactions:
            index.setdefault(u, set()).add(i)
        return index

    def val_items_by_user(self) -> dict[int, set[int]]:
        index: dict[int, set[int]] = {}
        for u, i in self.val_interactions:
            index.setdefault(u, set()).add(i)
        return index

    def train_items_by_user(self) -> dict[int, set[int]]:
        index: dict[int, set[int]] = {}
        for u, i in self.train_interactions:
            index.setdefault(u, set()).add(i)
        return index


@dataclass
class SyntheticSpec:
    """Configuration of the clustered synthetic generator."""

    n_users: int = 200
    n_items: int = 130
    n_clusters: int = 4
    p_in: float = 0.3
    p_out: float = 0.01
    feature_dim: int = 64
    feature_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1 or self.n_items < 1:
            raise ConfigError("synthetic spec needs at least one user and item")
        if not (1 <= self.n_clusters <= min(self.n_users, self.n_items)):
            raise ConfigError(
                f"n_clusters={self.n_clusters} must lie in [1, min(n_users, n_items)]"
            )
        if self.n_clusters > self.feature_dim:
            raise ConfigError(
                "feature_dim must be >= n_clusters for orthogonal centroids"
            )
        for name, p in (("p_in", self.p_in), ("p_out", self.p_out)):
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name}={p} outside [0, 1]")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be non-negative")


def _id_map_path(path: str, kind: str) -> str:
    base, _ = os.path.splitext(path)
    return f"{base}.{kind}_idmap.csv"


def _write_id_map(path: str, originals: list[str]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["original_id", "dense_id"])
        for dense, original in enumerate(originals):
            writer.writerow([original, dense])
    os.replace(tmp, path)


def load_interactions(path: str, write_id_maps: bool = True) -> Dataset:
    """Load an interaction CSV, densify ids, and persist the id maps.

    Duplicate ``(user, item)`` pairs are dropped with a logged count; a
    malformed row raises with its line number. A leading ``user_id,...``
    header row is tolerated.
    """
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    interactions: list[tuple[int, int]] = []
    timestamps: list[float] = []
    have_ts = False
    duplicates = 0
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and row[0].strip().lower() in ("user_id", "user"):
                continue
            if len(row) not in (2, 3):
                raise DataFormatError(
                    f"{path}:{lineno}: expected 2 or 3 columns, got {len(row)}"
                )
            u_raw, i_raw = row[0].strip(), row[1].strip()
            if not u_raw or not i_raw:
                raise DataFormatError(f"{path}:{lineno}: empty user or item id")
            ts = None
            if len(row) == 3:
                try:
                    ts = float(row[2])
                except ValueError as exc:
                    raise DataFormatError(
                        f"{path}:{lineno}: bad timestamp {row[2]!r}"
                    ) from exc
            u = users.setdefault(u_raw, len(users))
            i = items.setdefault(i_raw, len(items))
            if (u, i) in seen:
                duplicates += 1
                continue
            seen.add((u, i))
            interactions.append((u, i))
            if ts is not None:
                have_ts = True
                timestamps.append(ts)
    if not interactions:
        raise DataFormatError(f"{path}: no interactions found")
    if have_ts and len(timestamps) != len(interactions):
        raise DataFormatError(f"{path}: timestamp column present on only some rows")
    if duplicates:
        log.warning("%s: dropped %d duplicate interactions", path, duplicates)
    user_list = list(users)
    item_list = list(items)
    if write_id_maps:
        _write_id_map(_id_map_path(path, "users"), user_list)
        _write_id_map(_id_map_path(path, "items"), item_list)
    return Dataset(
        n_users=len(users),
        n_items=len(items),
        interactions=interactions,
        timestamps=timestamps if have_ts else None,
        user_ids=user_list,
        item_ids=item_list,
    )


def save_interactions(dataset: Dataset, path: str) -> None:
    """Write interactions as CSV using the original (pre-densified) ids."""
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        for idx, (u, i) in enumerate(dataset.interactions):
            row = [dataset.user_ids[u], dataset.item_ids[i]]
            if dataset.timestamps is not None:
                row.append(repr(dataset.timestamps[idx]))
            writer.writerow(row)
    os.replace(tmp, path)


def split_items(
    dataset: Dataset,
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
) -> SplitDataset:
    """Partition items into warm/val/cold by shuffled cumulative ratios.

    Counts use floor rounding for val and cold with the remainder assigned to
    warm, so 10 items at (0.6, 0.1, 0.3) give 6/1/3.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"bad split ratios {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = dataset.n_items
    if n < 3:
        raise ConfigError(f"need at least 3 items to split, got {n}")
    n_val = int(ratios[1] * n)
    n_cold = int(ratios[2] * n)
    n_warm = n - n_val - n_cold
    perm = stream_rng(seed, "split").permutation(n)
    warm = sorted(int(i) for i in perm[:n_warm])
    val = sorted(int(i) for i in perm[n_warm : n_warm + n_val])
    cold = sorted(int(i) for i in perm[n_warm + n_val :])
    warm_set, val_set = set(warm), set(val)
    train, val_rows, test = [], [], []
    for u, i in dataset.interactions:
        if i in warm_set:
            train.append((u, i))
        elif i in val_set:
            val_rows.append((u, i))
        else:
            test.append((u, i))
    return SplitDataset(
        dataset=dataset,
        warm_items=warm,
        val_items=val,
        cold_items=cold,
        train_interactions=train,
        val_interactions=val_rows,
        test_interactions=test,
    )


def sample_negatives(
    dataset: Dataset,
    user: int,
    k: int,
    rng: np.random.Generator,
    candidates: list[int] | np.ndarray | None = None,
) -> list[int]:
    """Draw k distinct non-interacted items for a user, uniformly.

    ``candidates`` restricts the pool (e.g. to warm items); by default the
    pool is the full item set.
    """
    if not (0 <= user < dataset.n_users):
        raise ConfigError(f"unknown user {user}")
    interacted = dataset.by_user()[user]
    if candidates is None:
        pool = np.array(
            [i for i in range(dataset.n_items) if i not in interacted], dtype=np.int64
        )
    else:
        pool = np.array([i for i in candidates if i not in interacted], dtype=np.int64)
    if k > pool.size:
        raise ConfigError(
            f"cannot draw {k} negatives for user {user}: only {pool.size} candidates"
        )
    picked = rng.choice(pool, size=k, replace=False)
    return [int(i) for i in picked]


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Clustered interactions plus item features.

    Users and items are assigned to clusters round-robin. Each (user, item)
    pair interacts with probability ``p_in`` when clusters match and ``p_out``
    otherwise. Item features are the cluster centroid (orthogonal unit
    vectors) plus Gaussian noise. Users that end up with zero interactions are
    redrawn up to 10 times, then given one forced in-cluster interaction.
    """
    spec.validate()
    rng = stream_rng(spec.seed, "synthetic")
    u_cluster = np.arange(spec.n_users) % spec.n_clusters
    i_cluster = np.arange(spec.n_items) % spec.n_clusters
    same = (u_cluster[:, None] == i_cluster[None, :]).astype(np.float64)
    probs = spec.p_out + (spec.p_in - spec.p_out) * same
    hits = rng.random((spec.n_users, spec.n_items)) < probs

    for u in range(spec.n_users):
        tries = 0
        while not hits[u].any() and tries < 10:
            hits[u] = rng.random(spec.n_items) < probs[u]
            tries += 1
        if not hits[u].any():
            in_cluster = np.flatnonzero(i_cluster == u_cluster[u])
            forced = int(rng.choice(in_cluster))
            hits[u, forced] = True

    interactions = [(int(u), int(i)) for u, i in zip(*np.nonzero(hits))]
    centroids = np.eye(spec.feature_dim)[:, : spec.n_clusters].T  # orthogonal units
    features = centroids[i_cluster] + spec.feature_noise * rng.standard_normal(
        (spec.n_items, spec.feature_dim)
    )
    dataset = Dataset(
        n_users=spec.n_users,
        n_items=spec.n_items,
        interactions=interactions,
    )
    return dataset, features
