"""Inversion-attack harness comparing embedding pipelines.

An attacker who sees generated item embeddings and a leaked fraction of the
true modality features trains a small network to invert embeddings back to
features.  The harness runs the same attack against two pipelines, the
stochastic denoising generator and the deterministic feature-to-embedding
mapper, and reports reconstruction quality plus information-theoretic
summaries (Gaussian mutual-information estimates, entropy floors, and a Fano
lower bound on attacker error when the features carry a discrete label).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import SplitDataset
from .diffusion import DenoisingGenerator
from .errors import ConfigError, NumericsError
from .mlp import TwoLayerMLP
from .modality import FeatureTable
from .numerics import stream_rng

ATTACK_HIDDEN = 128  # same attacker capacity against every pipeline
COV_RIDGE = 1e-6


@dataclass
class AttackReport:
    """Reconstruction quality of one inversion attack, averaged over items."""

    method: str
    mse: float
    mae: float
    cosine: float
    pearson: float


@dataclass
class PipelineComparison:
    diffusion: AttackReport
    mapper: AttackReport
    mi_diffusion: float
    mi_mapper: float
    entropy_diffusion: float
    entropy_mapper: float
    fano_diffusion: float | None
    fano_mapper: float | None
    # attacked (non-leaked) items: true features and each attacker's output,
    # kept so callers can build structural-similarity comparisons
    target_features: np.ndarray = None
    recon_diffusion: np.ndarray = None
    recon_mapper: np.ndarray = None


def train_inversion_attack(
    embeddings: np.ndarray,
    features: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
) -> TwoLayerMLP:
    """Fit an embedding -> feature inverter on leaked (embedding, feature) pairs."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if embeddings.shape[0] == 0:
        raise ConfigError("cannot train an inversion attack on an empty leak set")
    if embeddings.shape[0] != features.shape[0]:
        raise ConfigError(
            f"{embeddings.shape[0]} embeddings but {features.shape[0]} feature rows"
        )
    attacker = TwoLayerMLP.init(
        embeddings.shape[1], ATTACK_HIDDEN, features.shape[1], rng
    )
    attacker.sgd_train(embeddings, features, epochs, lr)
    return attacker


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    # Zero variance on either side leaves the correlation undefined; score 0.
    sa, sb = np.std(a), np.std(b)
    if sa == 0.0 or sb == 0.0:
        return 0.0
    r = np.mean((a - np.mean(a)) * (b - np.mean(b))) / (sa * sb)
    return float(np.clip(r, -1.0, 1.0))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def attack_and_score(
    attacker: TwoLayerMLP,
    embeddings: np.ndarray,
    features: np.ndarray,
    method: str,
) -> AttackReport:
    """Reconstruct features from embeddings and average per-item metrics."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if embeddings.shape[0] == 0:
        raise ConfigError("no target items to attack")
    if embeddings.shape[0] != features.shape[0]:
        raise ConfigError(
            f"{embeddings.shape[0]} embeddings but {features.shape[0]} feature rows"
        )
    recon = attacker.predict(embeddings)
    diff = recon - features
    mse = float(np.mean(np.mean(diff * diff, axis=1)))
    mae = float(np.mean(np.mean(np.abs(diff), axis=1)))
    cosines = [_cosine(recon[i], features[i]) for i in range(recon.shape[0])]
    pearsons = [_pearson(recon[i], features[i]) for i in range(recon.shape[0])]
    return AttackReport(
        method=method,
        mse=mse,
        mae=mae,
        cosine=float(np.mean(cosines)),
        pearson=float(np.mean(pearsons)),
    )


def _cosine_matrix(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    unit = rows / np.maximum(norms, 1e-300)
    return unit @ unit.T


def structural_similarity_difference(
    true_features: np.ndarray,
    recon_features: np.ndarray,
    sample_n: int = 20,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Difference of pairwise cosine-similarity matrices on a sampled item subset.

    A faithful reconstruction preserves which items look alike, so the
    difference matrix stays near zero even when absolute errors are large.
    """
    true_features = np.atleast_2d(np.asarray(true_features, dtype=np.float64))
    recon_features = np.atleast_2d(np.asarray(recon_features, dtype=np.float64))
    if true_features.shape != recon_features.shape:
        raise ConfigError("true and reconstructed feature shapes differ")
    n = true_features.shape[0]
    if sample_n < 2:
        raise ConfigError(f"sample_n must be >= 2, got {sample_n}")
    if n < sample_n:
        raise ConfigError(f"need at least {sample_n} items, got {n}")
    if n == sample_n:
        idx = np.arange(n)
    else:
        if rng is None:
            raise ConfigError("rng required when sampling a subset")
        idx = np.sort(rng.choice(n, size=sample_n, replace=False))
    return _cosine_matrix(true_features[idx]) - _cosine_matrix(recon_features[idx])


def fano_bound(mi_nats: float, n_categories: int) -> float:
    """Lower bound on any attacker's category-error probability, in [0, 1]."""
    if n_categories < 2:
        raise ConfigError(f"need at least 2 categories, got {n_categories}")
    if mi_nats < 0:
        raise ConfigError(f"mutual information must be non-negative, got {mi_nats}")
    return max(0.0, 1.0 - (mi_nats + math.log(2.0)) / math.log(n_categories))


def gaussian_noise_floor(dim: int, sigma_min: float) -> float:
    """Entropy floor (nats) of a dim-dimensional Gaussian with per-axis scale sigma_min."""
    if dim < 1:
        raise ConfigError(f"dimension must be >= 1, got {dim}")
    if sigma_min <= 0:
        raise ConfigError(f"sigma_min must be positive, got {sigma_min}")
    return 0.5 * dim * math.log(2.0 * math.pi * math.e * sigma_min * sigma_min)


def _ridged_logdet(cov: np.ndarray) -> float:
    cov = np.atleast_2d(cov)
    cov = cov + COV_RIDGE * np.eye(cov.shape[0])
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericsError("covariance is singular even after ridge regularization")
    return float(logdet)


def gaussian_entropy(rows: np.ndarray) -> float:
    """Differential entropy (nats) under a Gaussian fit with ridged covariance."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    n, d = rows.shape
    if n < d + 2:
        raise ConfigError(f"need at least {d + 2} rows for {d} dims, got {n}")
    logdet = _ridged_logdet(np.cov(rows, rowvar=False))
    return 0.5 * (d * math.log(2.0 * math.pi * math.e) + logdet)


def mi_gaussian_estimate(x: np.ndarray, y: np.ndarray) -> float:
    """Mutual information (nats) between row-paired samples under a joint-Gaussian fit."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise ConfigError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    n = x.shape[0]
    dims = x.shape[1] + y.shape[1]
    if n < dims + 2:
        raise ConfigError(f"need at least {dims + 2} rows for {dims} joint dims, got {n}")
    logdet_x = _ridged_logdet(np.cov(x, rowvar=False))
    logdet_y = _ridged_logdet(np.cov(y, rowvar=False))
    logdet_xy = _ridged_logdet(np.cov(np.hstack([x, y]), rowvar=False))
    return 0.5 * (logdet_x + logdet_y - logdet_xy)


def _split_leak(
    n: int, leak: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < leak < 1.0:
        raise ConfigError(f"leak fraction must be in (0, 1), got {leak}")
    n_leak = max(1, round(leak * n))
    if n_leak >= n:
        raise ConfigError(f"leak fraction {leak} leaves no target items out of {n}")
    perm = rng.permutation(n)
    return np.sort(perm[:n_leak]), np.sort(perm[n_leak:])


def compare_pipelines(
    split: SplitDataset,
    features: FeatureTable,
    generator: DenoisingGenerator,
    mapper: TwoLayerMLP,
    seed: int,
    leak: float = 0.2,
    attack_epochs: int = 500,
    attack_lr: float = 0.01,
    mi_draws: int = 8,
    n_clusters: int | None = None,
) -> PipelineComparison:
    """Run the same inversion attack against both cold-item pipelines.

    Both pipelines share the leaked item subset and the attacker architecture.
    The generator runs in stochastic mode, its per-step noise being the
    mechanism under test; the mapper is deterministic by construction.  MI is
    estimated from mi_draws repeated generations per cold item so the sample
    count clears the joint-Gaussian row requirement (the mapper's rows repeat
    verbatim, as its output cannot vary).  When the features carry a known
    discrete label (synthetic clusters), a Fano bound is reported as well.
    """
    cold = list(split.cold_items)
    if len(cold) < 3:
        raise ConfigError(f"need at least 3 cold items, got {len(cold)}")
    cold_features = features.rows[cold]
    leak_idx, target_idx = _split_leak(
        len(cold), leak, stream_rng(seed, "privacy", "leak")
    )

    def stacked_draws(label_prefix: str, stochastic: bool) -> np.ndarray:
        draws = []
        for d in range(mi_draws):
            if stochastic:
                draws.append(
                    generator.generate(
                        cold,
                        cold_features,
                        seed,
                        mode="stochastic",
                        stream_label=f"{label_prefix}{d}",
                    )
                )
            else:
                draws.append(mapper.predict(cold_features))
        return np.vstack(draws)

    emb_diffusion = generator.generate(
        cold, cold_features, seed, mode="stochastic", stream_label="attack"
    )
    emb_mapper = mapper.predict(cold_features)

    reports, recons = {}, {}
    for method, emb in (("diffusion", emb_diffusion), ("mapper", emb_mapper)):
        attacker = train_inversion_attack(
            emb[leak_idx],
            cold_features[leak_idx],
            attack_epochs,
            attack_lr,
            stream_rng(seed, "privacy", "attacker-init"),
        )
        reports[method] = attack_and_score(
            attacker, emb[target_idx], cold_features[target_idx], method
        )
        recons[method] = attacker.predict(emb[target_idx])

    feature_rep = np.vstack([cold_features] * mi_draws)
    mi_values, entropies = {}, {}
    for method, stochastic in (("diffusion", True), ("mapper", False)):
        rows = stacked_draws(f"attack-mi-{method}-", stochastic)
        mi_values[method] = mi_gaussian_estimate(feature_rep, rows)
        entropies[method] = gaussian_entropy(rows)

    def fano(method: str) -> float | None:
        if n_clusters is None:
            return None
        return fano_bound(max(0.0, mi_values[method]), n_clusters)

    return PipelineComparison(
        diffusion=reports["diffusion"],
        mapper=reports["mapper"],
        mi_diffusion=mi_values["diffusion"],
        mi_mapper=mi_values["mapper"],
        entropy_diffusion=entropies["diffusion"],
        entropy_mapper=entropies["mapper"],
        fano_diffusion=fano("diffusion"),
        fano_mapper=fano("mapper"),
        target_features=cold_features[target_idx],
        recon_diffusion=recons["diffusion"],
        recon_mapper=recons["mapper"],
    )
