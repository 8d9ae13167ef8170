"""Federated matrix-factorization simulator.

Clients hold a private user embedding and train locally on a distributed copy
of the global item table; only touched item rows travel back to the server,
optionally with per-entry Laplace noise. The server averages uploads row-wise,
trains the diffusion generator on warm rows, and redistributes. Everything is
sequential and keyed off per-(round, client) RNG streams, so a simulation is a
deterministic function of (dataset, config, seed).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SplitDataset
from .diffusion import DenoisingGenerator
from .errors import ConfigError
from .mlp import TwoLayerMLP
from .modality import FeatureTable
from .numerics import sigmoid, stream_rng

PROB_CLAMP = 1e-12
INIT_STD = 0.01


@dataclass
class FedConfig:
    rounds: int = 100
    local_lr: float = 0.1
    negatives_per_positive: int = 5
    batch_size: int = 256
    client_sample_ratio: float = 1.0
    server_epochs: int = 1
    ldp_scale: float = 0.0
    light_mode: bool = False
    dim: int = 64

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_lr <= 0:
            raise ConfigError("local_lr must be positive")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0.0 < self.client_sample_ratio <= 1.0):
            raise ConfigError(
                f"client_sample_ratio={self.client_sample_ratio} outside (0, 1]"
            )
        if self.server_epochs < 1:
            raise ConfigError("server_epochs must be >= 1")
        if self.ldp_scale < 0:
            raise ConfigError("ldp_scale must be non-negative")
        if self.dim < 1:
            raise ConfigError("dim must be positive")


@dataclass
class ClientState:
    """Private per-user state; the embedding never leaves the client.

    ``warm_positives`` are the user's training items and ``negative_pool``
    the warm items they never interacted with, both fixed for the run.
    """

    user_id: int
    user_embedding: np.ndarray
    warm_positives: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    negative_pool: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


@dataclass
class ClientUpload:
    """Touched item rows only; there is no field for the user embedding."""

    user_id: int
    rows: dict[int, np.ndarray]


@dataclass
class GlobalItemTable:
    embeddings: np.ndarray  # (n_items, dim) float64
    round: int = 0


@dataclass
class ServerState:
    table: GlobalItemTable
    pending: list[ClientUpload] = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    mean_client_loss: float
    diffusion_loss: float | None
    seconds: float


def predict_score(user_embedding: np.ndarray, item_embedding: np.ndarray) -> float:
    """Interaction probability: logistic of the embedding dot product."""
    return float(sigmoid(float(np.dot(user_embedding, item_embedding))))


def score_items(user_embedding: np.ndarray, item_rows: np.ndarray) -> np.ndarray:
    """Vectorized ``predict_score`` over item rows."""
    return sigmoid(item_rows @ user_embedding)


def bce_loss(y: float, y_hat: float) -> float:
    p = min(max(y_hat, PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def init_simulation(
    split: SplitDataset, config: FedConfig, seed: int
) -> tuple[ServerState, list[ClientState]]:
    """Gaussian-initialized item table and clients with static training pools."""
    config.validate()
    ds = split.dataset
    rng = stream_rng(seed, "init")
    table = GlobalItemTable(
        embeddings=INIT_STD * rng.standard_normal((ds.n_items, config.dim))
    )
    train_by_user = split.train_items_by_user()
    warm = np.array(split.warm_items, dtype=np.int64)
    clients = []
    for u in range(ds.n_users):
        positives = np.array(sorted(train_by_user.get(u, ())), dtype=np.int64)
        interacted = ds.by_user()[u]
        pool = np.array([i for i in warm if i not in interacted], dtype=np.int64)
        clients.append(
            ClientState(
                user_id=u,
                user_embedding=INIT_STD * rng.standard_normal(config.dim),
                warm_positives=positives,
                negative_pool=pool,
            )
        )
    return ServerState(table=table), clients


def client_local_train(
    state: ClientState,
    table: np.ndarray,
    rng: np.random.Generator,
    config: FedConfig,
) -> tuple[dict[int, np.ndarray], float]:
    """One local pass: per positive, one BCE-SGD step for it and each negative.

    Item rows are copied on first touch so the global table is never written;
    the returned dict holds the client's updated local rows.
    """
    local: dict[int, np.ndarray] = {}
    e_u = state.user_embedding
    lr = config.local_lr
    loss_sum = 0.0
    n_examples = 0
    k = config.negatives_per_positive
    for pos in state.warm_positives:
        if k > state.negative_pool.size:
            raise ConfigError(
                f"user {state.user_id}: negative pool too small for {k} draws"
            )
        negatives = rng.choice(state.negative_pool, size=k, replace=False)
        for item, y in ((int(pos), 1.0), *((int(n), 0.0) for n in negatives)):
            row = local.get(item)
            if row is None:
                row = table[item].copy()
                local[item] = row
            y_hat = sigmoid(float(np.dot(e_u, row)))
            loss_sum += bce_loss(y, y_hat)
            n_examples += 1
            g = y_hat - y
            grad_user = g * row
            row -= lr * g * e_u
            e_u -= lr * grad_user
    mean_loss = loss_sum / n_examples if n_examples else 0.0
    return local, mean_loss


def apply_ldp(
    rows: dict[int, np.ndarray], scale: float, rng: np.random.Generator
) -> dict[int, np.ndarray]:
    """Per-entry Laplace noise on upload rows; scale 0 is a bitwise no-op."""
    if scale < 0:
        raise ConfigError("ldp scale must be non-negative")
    if scale == 0.0:
        return rows
    noisy = {}
    for item in sorted(rows):
        noisy[item] = rows[item] + rng.laplace(0.0, scale, size=rows[item].shape)
    return noisy


def aggregate(table: GlobalItemTable, uploads: list[ClientUpload]) -> GlobalItemTable:
    """Row-wise arithmetic mean over uploaders; untouched rows carry over.

    Upload rows are stacked in ascending client order and summed pairwise, so
    the result does not depend on the order uploads arrive in.
    """
    new = table.embeddings.copy()
    per_item: dict[int, list[np.ndarray]] = {}
    for up in sorted(uploads, key=lambda u: u.user_id):
        for item, row in up.rows.items():
            per_item.setdefault(item, []).append(row)
    for item in sorted(per_item):
        new[item] = np.mean(np.stack(per_item[item]), axis=0)
    return GlobalItemTable(embeddings=new, round=table.round)


def diffusion_trains_this_round(round_index: int, light_mode: bool) -> bool:
    """Light cadence trains on odd rounds only (1-based), full on every round."""
    return (round_index % 2 == 1) if light_mode else True


def run_round(
    server: ServerState,
    clients: list[ClientState],
    generator: DenoisingGenerator | None,
    features: FeatureTable | None,
    split: SplitDataset,
    config: FedConfig,
    seed: int,
) -> RoundReport:
    """One federated round.

    Aggregates the previous round's uploads (if any), trains the diffusion
    generator on warm rows unless the light cadence skips this round,
    distributes the table, runs local training on the sampled clients, and
    stores their uploads for the next round's aggregation.
    """
    start = time.perf_counter()
    round_index = server.table.round + 1
    if server.pending:
        server.table = aggregate(server.table, server.pending)
        server.pending = []
    server.table.round = round_index

    diffusion_loss = None
    if generator is not None and diffusion_trains_this_round(
        round_index, config.light_mode
    ):
        if features is None:
            raise ConfigError("diffusion training requires item features")
        warm = np.array(split.warm_items, dtype=np.int64)
        diffusion_loss = generator.train_epochs(
            server.table.embeddings[warm],
            features.rows[warm],
            stream_rng(seed, "diffusion", round_index),
            epochs=config.server_epochs,
            batch_size=config.batch_size,
        )

    if config.client_sample_ratio >= 1.0:
        sampled = clients
    else:
        count = max(1, math.ceil(config.client_sample_ratio * len(clients)))
        picked = stream_rng(seed, "sampling", round_index).choice(
            len(clients), size=count, replace=False
        )
        sampled = [clients[i] for i in sorted(picked)]
    if not sampled:
        raise ConfigError("no clients sampled this round")

    uploads = []
    losses = []
    for client in sampled:
        rng = stream_rng(seed, "client", round_index, client.user_id)
        rows, loss = client_local_train(
            client, server.table.embeddings, rng, config
        )
        if client.warm_positives.size:
            losses.append(loss)
        rows = apply_ldp(rows, config.ldp_scale, rng)
        uploads.append(ClientUpload(user_id=client.user_id, rows=rows))
    server.pending = uploads
    mean_loss = float(np.mean(losses)) if losses else 0.0
    return RoundReport(
        round=round_index,
        mean_client_loss=mean_loss,
        diffusion_loss=diffusion_loss,
        seconds=time.perf_counter() - start,
    )


def finalize_table(server: ServerState) -> None:
    """Fold the last round's uploads into the table after the loop ends."""
    if server.pending:
        server.table = aggregate(server.table, server.pending)
        server.pending = []


def train_baseline_mapper(
    features: np.ndarray,
    embeddings: np.ndarray,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    hidden: int = 128,
) -> TwoLayerMLP:
    """Deterministic feature-to-embedding regressor used as the non-generative foil."""
    if features.shape[0] != embeddings.shape[0]:
        raise ConfigError(
            f"feature rows {features.shape[0]} != embedding rows {embeddings.shape[0]}"
        )
    if features.shape[0] == 0:
        raise ConfigError("cannot train the mapper on zero rows")
    mlp = TwoLayerMLP.init(features.shape[1], hidden, embeddings.shape[1], rng)
    mlp.sgd_train(features, embeddings, epochs=epochs, lr=lr)
    return mlp
