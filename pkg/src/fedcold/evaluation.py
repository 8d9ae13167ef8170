"""Cold-item ranking metrics and embedding-distribution diagnostics.

The cold protocol ranks every cold item for each user with at least one test
interaction, then macro-averages recall, precision, and NDCG at each cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .federation import score_items


@dataclass
class KMetrics:
    recall: float
    precision: float
    ndcg: float


@dataclass
class MetricsReport:
    per_k: dict[int, KMetrics]
    n_users: int


@dataclass
class DistributionDiagnostics:
    centroid_distance: float
    covariance_distance: float


def rank_cold(
    user_embedding: np.ndarray, cold_ids: list[int], cold_embeddings: np.ndarray
) -> list[int]:
    """Cold items sorted by predicted score, ties broken by ascending id."""
    if len(cold_ids) != cold_embeddings.shape[0]:
        raise ConfigError(
            f"{len(cold_ids)} ids but {cold_embeddings.shape[0]} embedding rows"
        )
    scores = score_items(user_embedding, cold_embeddings)
    ids = np.asarray(cold_ids)
    order = np.lexsort((ids, -scores))
    return [int(ids[i]) for i in order]


def recall_precision_at_k(
    ranking: list[int], relevant: set[int], k: int
) -> tuple[float, float]:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not relevant:
        raise ConfigError("relevant set must be non-empty")
    hits = sum(1 for item in ranking[:k] if item in relevant)
    return hits / len(relevant), hits / k


def ndcg_at_k(ranking: list[int], relevant: set[int], k: int) -> float:
    """Binary-relevance NDCG with 1/log2(rank+1) discounts."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not relevant:
        raise ConfigError("relevant set must be non-empty")
    dcg = 0.0
    for rank, item in enumerate(ranking[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    ideal_hits = min(len(relevant), k)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, ideal_hits + 1))
    return dcg / idcg


def evaluate_cold(
    user_embeddings: np.ndarray,
    cold_ids: list[int],
    cold_embeddings: np.ndarray,
    test_by_user: dict[int, set[int]],
    k_list: list[int],
) -> MetricsReport:
    """Macro-averaged ranking quality over users with test interactions.

    Users whose test items are not cold ids (or with empty test sets) are
    skipped; each remaining user ranks the full cold catalogue.
    """
    if not k_list or any(k < 1 for k in k_list):
        raise ConfigError(f"bad cutoff list {k_list}")
    cold_set = set(cold_ids)
    sums = {k: np.zeros(3) for k in k_list}
    n_users = 0
    for user in sorted(test_by_user):
        relevant = test_by_user[user] & cold_set
        if not relevant:
            continue
        ranking = rank_cold(user_embeddings[user], cold_ids, cold_embeddings)
        n_users += 1
        for k in k_list:
            recall, precision = recall_precision_at_k(ranking, relevant, k)
            ndcg = ndcg_at_k(ranking, relevant, k)
            sums[k] += (recall, precision, ndcg)
    if n_users == 0:
        raise ConfigError("no users with cold test interactions to evaluate")
    per_k = {
        k: KMetrics(
            recall=float(sums[k][0] / n_users),
            precision=float(sums[k][1] / n_users),
            ndcg=float(sums[k][2] / n_users),
        )
        for k in k_list
    }
    return MetricsReport(per_k=per_k, n_users=n_users)


def distribution_diagnostics(
    warm_rows: np.ndarray, cold_rows: np.ndarray
) -> DistributionDiagnostics:
    """Centroid and covariance gaps between warm and generated embeddings.

    Centroid distance is the Euclidean gap between means; covariance distance
    is the Frobenius gap between sample covariance matrices.
    """
    if warm_rows.shape[0] < 2 or cold_rows.shape[0] < 2:
        raise ConfigError("diagnostics need at least 2 rows per side")
    if warm_rows.shape[1] != cold_rows.shape[1]:
        raise ConfigError("warm and cold widths differ")
    centroid = float(
        np.linalg.norm(warm_rows.mean(axis=0) - cold_rows.mean(axis=0))
    )
    cov_warm = np.cov(warm_rows, rowvar=False)
    cov_cold = np.cov(cold_rows, rowvar=False)
    covariance = float(np.linalg.norm(cov_warm - cov_cold, ord="fro"))
    return DistributionDiagnostics(
        centroid_distance=centroid, covariance_distance=covariance
    )
