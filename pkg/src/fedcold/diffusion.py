"""Conditional denoising diffusion over item embeddings.

The forward process corrupts a clean embedding with a linear low-noise
schedule; the denoiser predicts the clean embedding directly from the noisy
one, the timestep, and an item modality condition fused in through multi-head
attention. Reverse sampling walks the posterior means from pure noise down to
a generated embedding. All gradients are hand-written and validated against
the finite-difference oracle in :mod:`fedcold.numerics`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import Adam, affine, softmax_rows, stream_rng

INFERENCE_MODES = ("deterministic_mean", "stochastic")


@dataclass
class DiffusionConfig:
    """Schedule and model hyperparameters.

    ``noise_scale``, ``noise_min`` and ``noise_max`` set the linear schedule
    of total corruption levels: level(t) = noise_scale * (noise_min +
    (t-1)/(steps-1) * (noise_max - noise_min)).
    """

    steps: int = 40
    noise_scale: float = 0.1
    noise_min: float = 0.001
    noise_max: float = 0.01
    heads: int = 4
    server_lr: float = 1e-3
    inference_mode: str = "deterministic_mean"

    def validate(self) -> None:
        if self.steps < 2:
            raise ConfigError(f"diffusion steps must be >= 2, got {self.steps}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.server_lr <= 0:
            raise ConfigError("server_lr must be positive")
        if self.inference_mode not in INFERENCE_MODES:
            raise ConfigError(f"unknown inference mode {self.inference_mode!r}")
        _validate_levels(self.steps, self.noise_scale, self.noise_min, self.noise_max)


def _validate_levels(steps: int, scale: float, lo: float, hi: float) -> None:
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if scale <= 0:
        raise ConfigError(f"noise_scale must be positive, got {scale}")
    if lo <= 0:
        raise ConfigError(f"noise_min must be positive, got {lo}")
    if steps >= 2 and not lo < hi:
        raise ConfigError(f"noise_min={lo} must be < noise_max={hi}")
    if scale * hi >= 1:
        raise ConfigError(
            f"total corruption noise_scale*noise_max={scale * hi} must stay below 1"
        )


@dataclass
class NoiseSchedule:
    """Precomputed schedule arrays indexed by timestep 1..steps.

    Index 0 holds the boundary convention: no corruption before the chain
    starts, so ``alpha_bar[0] == 1`` and the step-1 posterior variance is
    exactly zero.
    """

    steps: int
    alpha_bar: np.ndarray  # cumulative signal fraction, length steps+1
    alpha: np.ndarray  # per-step signal fraction alpha_bar[t]/alpha_bar[t-1]
    beta: np.ndarray  # per-step noise fraction 1 - alpha
    sigma2: np.ndarray  # posterior variance per step, sigma2[1] == 0


def build_schedule(
    steps: int, noise_scale: float, noise_min: float, noise_max: float
) -> NoiseSchedule:
    """Linear corruption-level schedule.

    ``steps == 1`` is permitted for minimal chains and uses the lower
    endpoint only.
    """
    _validate_levels(steps, noise_scale, noise_min, noise_max)
    t = np.arange(1, steps + 1, dtype=np.float64)
    if steps == 1:
        levels = np.array([noise_scale * noise_min])
    else:
        levels = noise_scale * (
            noise_min + (t - 1.0) / (steps - 1.0) * (noise_max - noise_min)
        )
    alpha_bar = np.empty(steps + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = 1.0 - levels
    if np.any(np.diff(alpha_bar) >= 0):
        raise ConfigError("schedule must be strictly decreasing in alpha_bar")
    alpha = np.empty(steps + 1)
    alpha[0] = 1.0
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    beta = np.empty(steps + 1)
    beta[0] = 0.0
    beta[1:] = 1.0 - alpha[1:]
    sigma2 = np.empty(steps + 1)
    sigma2[0] = 0.0
    sigma2[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(
        steps=steps, alpha_bar=alpha_bar, alpha=alpha, beta=beta, sigma2=sigma2
    )


@dataclass
class DenoiserParams:
    """Learnable tensors of the conditional denoiser.

    The time encoding and the raw condition are projected to the model width
    and stacked as the two attention key/value rows; queries come from the
    noisy embedding, one slice per head. The fused vector is concatenated
    with the noisy embedding and pushed through a two-hidden-layer tanh trunk
    back to the embedding width.
    """

    width: int
    heads: int
    cond_dim: int
    time_w: np.ndarray
    time_b: np.ndarray
    cond_w: np.ndarray
    cond_b: np.ndarray
    query_w: np.ndarray
    out_w: np.ndarray
    trunk1_w: np.ndarray
    trunk1_b: np.ndarray
    trunk2_w: np.ndarray
    trunk2_b: np.ndarray
    trunk3_w: np.ndarray
    trunk3_b: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "time_w": self.time_w,
            "time_b": self.time_b,
            "cond_w": self.cond_w,
            "cond_b": self.cond_b,
            "query_w": self.query_w,
            "out_w": self.out_w,
            "trunk1_w": self.trunk1_w,
            "trunk1_b": self.trunk1_b,
            "trunk2_w": self.trunk2_w,
            "trunk2_b": self.trunk2_b,
            "trunk3_w": self.trunk3_w,
            "trunk3_b": self.trunk3_b,
        }

    @classmethod
    def from_tensors(
        cls, width: int, heads: int, cond_dim: int, tensors: dict[str, np.ndarray]
    ) -> "DenoiserParams":
        def mat(name: str) -> np.ndarray:
            return np.asarray(tensors[name], dtype=np.float64)

        def vec(name: str) -> np.ndarray:
            return np.asarray(tensors[name], dtype=np.float64).ravel()

        return cls(
            width=width,
            heads=heads,
            cond_dim=cond_dim,
            time_w=mat("time_w"),
            time_b=vec("time_b"),
            cond_w=mat("cond_w"),
            cond_b=vec("cond_b"),
            query_w=mat("query_w"),
            out_w=mat("out_w"),
            trunk1_w=mat("trunk1_w"),
            trunk1_b=vec("trunk1_b"),
            trunk2_w=mat("trunk2_w"),
            trunk2_b=vec("trunk2_b"),
            trunk3_w=mat("trunk3_w"),
            trunk3_b=vec("trunk3_b"),
        )


def init_denoiser(
    width: int, heads: int, cond_dim: int, rng: np.random.Generator
) -> DenoiserParams:
    if width < 2 or width % 2 != 0:
        raise ConfigError(f"embedding width must be even and >= 2, got {width}")
    if heads < 1 or width % heads != 0:
        raise ConfigError(f"width {width} must be divisible by heads {heads}")
    if cond_dim < 1:
        raise ConfigError(f"condition dim must be positive, got {cond_dim}")

    def xavier(rows: int, cols: int) -> np.ndarray:
        return np.sqrt(2.0 / (rows + cols)) * rng.standard_normal((rows, cols))

    return DenoiserParams(
        width=width,
        heads=heads,
        cond_dim=cond_dim,
        time_w=xavier(width, width),
        time_b=np.zeros(width),
        cond_w=xavier(cond_dim, width),
        cond_b=np.zeros(width),
        query_w=xavier(width, width),
        out_w=xavier(width, width),
        trunk1_w=xavier(2 * width, 2 * width),
        trunk1_b=np.zeros(2 * width),
        trunk2_w=xavier(2 * width, 2 * width),
        trunk2_b=np.zeros(2 * width),
        trunk3_w=xavier(2 * width, width),
        trunk3_b=np.zeros(width),
    )


def sinusoidal_encoding(t, width: int) -> np.ndarray:
    """Fixed sin/cos timestep encoding with geometric frequency spacing."""
    if width % 2 != 0:
        raise ConfigError(f"encoding width must be even, got {width}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))[:, None]
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _as_batch(x: np.ndarray | None) -> tuple[np.ndarray | None, bool]:
    if x is None:
        return None, False
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _check_t(t: np.ndarray, steps: int, lowest: int = 1) -> None:
    if np.any(t < lowest) or np.any(t > steps):
        raise ConfigError(f"timestep out of range [{lowest}, {steps}]")


def _forward(
    e_t: np.ndarray, t: np.ndarray, m: np.ndarray | None, p: DenoiserParams
):
    n, d = e_t.shape
    h, dh = p.heads, p.width // p.heads
    if d != p.width:
        raise ConfigError(f"embedding width {d} does not match model width {p.width}")
    if m is not None and m.shape[1] != p.cond_dim:
        raise ConfigError(
            f"condition dim {m.shape[1]} does not match model cond_dim {p.cond_dim}"
        )
    tenc = sinusoidal_encoding(t, d)
    kv_rows = [affine(tenc, p.time_w, p.time_b)]
    if m is not None:
        kv_rows.append(affine(m, p.cond_w, p.cond_b))
    kv = np.stack(kv_rows, axis=1)  # (n, r, d)
    r = kv.shape[1]
    qh = (e_t @ p.query_w).reshape(n, h, dh)
    kvh = kv.reshape(n, r, h, dh)
    scale = 1.0 / math.sqrt(dh)
    scores = np.einsum("nhd,nrhd->nhr", qh, kvh) * scale
    attn = softmax_rows(scores)
    heads_out = np.einsum("nhr,nrhd->nhd", attn, kvh)
    concat = heads_out.reshape(n, d)
    fused = concat @ p.out_w
    x = np.concatenate([e_t, fused], axis=1)
    a1 = np.tanh(x @ p.trunk1_w + p.trunk1_b)
    a2 = np.tanh(a1 @ p.trunk2_w + p.trunk2_b)
    out = a2 @ p.trunk3_w + p.trunk3_b
    cache = (e_t, tenc, m, qh, kvh, attn, concat, x, a1, a2, scale, r, fused)
    return out, cache


def _backward(d_out: np.ndarray, cache, p: DenoiserParams) -> dict[str, np.ndarray]:
    e_t, tenc, m, qh, kvh, attn, concat, x, a1, a2, scale, r, _ = cache
    n, d = e_t.shape
    h, dh = p.heads, p.width // p.heads
    grads: dict[str, np.ndarray] = {}
    grads["trunk3_w"] = a2.T @ d_out
    grads["trunk3_b"] = d_out.sum(axis=0)
    d_a2 = d_out @ p.trunk3_w.T
    d_z2 = d_a2 * (1.0 - a2 * a2)
    grads["trunk2_w"] = a1.T @ d_z2
    grads["trunk2_b"] = d_z2.sum(axis=0)
    d_a1 = d_z2 @ p.trunk2_w.T
    d_z1 = d_a1 * (1.0 - a1 * a1)
    grads["trunk1_w"] = x.T @ d_z1
    grads["trunk1_b"] = d_z1.sum(axis=0)
    d_x = d_z1 @ p.trunk1_w.T
    d_fused = d_x[:, d:]
    grads["out_w"] = concat.T @ d_fused
    d_heads = (d_fused @ p.out_w.T).reshape(n, h, dh)
    # value path (K == V) plus the softmax/key path
    d_attn = np.einsum("nhd,nrhd->nhr", d_heads, kvh)
    d_kvh = np.einsum("nhr,nhd->nrhd", attn, d_heads)
    d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
    d_qh = np.einsum("nhr,nrhd->nhd", d_scores, kvh) * scale
    d_kvh += np.einsum("nhr,nhd->nrhd", d_scores, qh) * scale
    grads["query_w"] = e_t.T @ d_qh.reshape(n, d)
    d_kv = d_kvh.reshape(n, r, d)
    grads["time_w"] = tenc.T @ d_kv[:, 0, :]
    grads["time_b"] = d_kv[:, 0, :].sum(axis=0)
    if m is not None:
        grads["cond_w"] = m.T @ d_kv[:, 1, :]
        grads["cond_b"] = d_kv[:, 1, :].sum(axis=0)
    else:
        grads["cond_w"] = np.zeros_like(p.cond_w)
        grads["cond_b"] = np.zeros_like(p.cond_b)
    return grads


def fuse_conditions(
    e_t: np.ndarray,
    t,
    m: np.ndarray | None,
    params: DenoiserParams,
    return_attention: bool = False,
):
    """Multi-head attention fusion of timestep and modality condition.

    Keys and values are the projected time encoding and projected condition
    (one row each, or just the time row when ``m`` is None); queries are
    per-head slices of the projected noisy embedding.
    """
    e_t, single = _as_batch(e_t)
    m, _ = _as_batch(m)
    t_arr = np.atleast_1d(np.asarray(t))
    if t_arr.size == 1 and e_t.shape[0] > 1:
        t_arr = np.full(e_t.shape[0], int(t_arr[0]))
    _, cache = _forward(e_t, t_arr, m, params)
    fused = cache[-1]
    attn = cache[5]
    if single:
        fused = fused[0]
        attn = attn[0]
    return (fused, attn) if return_attention else fused


def predict_denoised(
    e_t: np.ndarray, t, m: np.ndarray | None, params: DenoiserParams
) -> np.ndarray:
    """Denoiser forward pass: estimate the clean embedding."""
    e_t, single = _as_batch(e_t)
    m, _ = _as_batch(m)
    if m is not None and m.shape[0] == 1 and e_t.shape[0] > 1:
        m = np.broadcast_to(m, (e_t.shape[0], m.shape[1]))
    t_arr = np.atleast_1d(np.asarray(t))
    if t_arr.size == 1 and e_t.shape[0] > 1:
        t_arr = np.full(e_t.shape[0], int(t_arr[0]))
    out, _ = _forward(e_t, t_arr, m, params)
    return out[0] if single else out


def q_sample(
    e0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Corrupt a clean embedding to timestep t with given noise."""
    e0 = np.asarray(e0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if e0.shape != eps.shape:
        raise ConfigError(f"e0 shape {e0.shape} != eps shape {eps.shape}")
    t_arr = np.atleast_1d(np.asarray(t))
    _check_t(t_arr, schedule.steps, lowest=0)
    ab = schedule.alpha_bar[t_arr]
    if e0.ndim == 2 and ab.size == e0.shape[0]:
        ab = ab[:, None]
    elif ab.size == 1:
        ab = ab[0]
    return np.sqrt(ab) * e0 + np.sqrt(1.0 - ab) * eps


def _posterior_coeffs(t, schedule: NoiseSchedule):
    """Shared coefficients of the exact posterior mean and of the model mean.

    Both the data posterior and the model posterior scale ``e_t`` and the
    clean estimate with these same two numbers, so the identity between them
    holds bitwise.
    """
    t_arr = np.atleast_1d(np.asarray(t))
    _check_t(t_arr, schedule.steps)
    one_minus_ab = 1.0 - schedule.alpha_bar[t_arr]
    c_noisy = (
        np.sqrt(schedule.alpha[t_arr])
        * (1.0 - schedule.alpha_bar[t_arr - 1])
        / one_minus_ab
    )
    c_clean = (
        np.sqrt(schedule.alpha_bar[t_arr - 1]) * schedule.beta[t_arr] / one_minus_ab
    )
    var = (
        schedule.beta[t_arr]
        * (1.0 - schedule.alpha_bar[t_arr - 1])
        / one_minus_ab
    )
    return c_noisy, c_clean, var


def _broadcast_coeff(c: np.ndarray, like: np.ndarray):
    if like.ndim == 2 and c.size == like.shape[0]:
        return c[:, None]
    if c.size == 1:
        return c[0]
    return c


def posterior_stats(
    e0: np.ndarray, e_t: np.ndarray, t, schedule: NoiseSchedule
) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and variance of the reverse-step posterior given e0."""
    e0 = np.asarray(e0, dtype=np.float64)
    e_t = np.asarray(e_t, dtype=np.float64)
    if e0.shape != e_t.shape:
        raise ConfigError(f"e0 shape {e0.shape} != e_t shape {e_t.shape}")
    c_noisy, c_clean, var = _posterior_coeffs(t, schedule)
    mean = _broadcast_coeff(c_noisy, e_t) * e_t + _broadcast_coeff(c_clean, e0) * e0
    return mean, var if var.size > 1 else var[0]


def posterior_mean_from_prediction(
    e_t: np.ndarray, t, e0_hat: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Model-side posterior mean: the exact mean with e0 replaced by ê0."""
    e_t = np.asarray(e_t, dtype=np.float64)
    e0_hat = np.asarray(e0_hat, dtype=np.float64)
    if e_t.shape != e0_hat.shape:
        raise ConfigError(f"e_t shape {e_t.shape} != e0_hat shape {e0_hat.shape}")
    c_noisy, c_clean, _ = _posterior_coeffs(t, schedule)
    return _broadcast_coeff(c_noisy, e_t) * e_t + _broadcast_coeff(c_clean, e0_hat) * e0_hat


def elbo_loss_fixed(
    e0: np.ndarray,
    m: np.ndarray | None,
    t: np.ndarray,
    eps: np.ndarray,
    params: DenoiserParams,
    schedule: NoiseSchedule,
) -> tuple[float, dict[str, np.ndarray]]:
    """Reconstruction loss and gradients for fixed timesteps and noise.

    The training objective fixes the clean-embedding parameterization: the
    loss is the mean squared error between the denoiser output and the clean
    embedding, averaged over the batch.
    """
    e0, _ = _as_batch(e0)
    m, _ = _as_batch(m)
    eps, _ = _as_batch(eps)
    t_arr = np.atleast_1d(np.asarray(t))
    _check_t(t_arr, schedule.steps)
    e_t = q_sample(e0, t_arr, eps, schedule)
    pred, cache = _forward(e_t, t_arr, m, params)
    diff = pred - e0
    loss = float(np.mean(diff * diff))
    d_out = 2.0 * diff / diff.size
    grads = _backward(d_out, cache, params)
    return loss, grads


def elbo_loss(
    e0: np.ndarray,
    m: np.ndarray | None,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray]]:
    """Monte Carlo training loss: one uniform timestep and noise per row."""
    e0, _ = _as_batch(e0)
    n = e0.shape[0]
    t = rng.integers(1, schedule.steps + 1, size=n)
    eps = rng.standard_normal(e0.shape)
    return elbo_loss_fixed(e0, m, t, eps, params, schedule)


def reverse_sample(
    m: np.ndarray | None,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mode: str = "deterministic_mean",
) -> np.ndarray:
    """Generate one embedding by walking the reverse chain from pure noise.

    In deterministic mode each step moves to the model posterior mean; in
    stochastic mode steps above 1 add posterior-scaled Gaussian noise.
    """
    if mode not in INFERENCE_MODES:
        raise ConfigError(f"unknown inference mode {mode!r}")
    x = rng.standard_normal(params.width)
    m_row = None if m is None else np.asarray(m, dtype=np.float64)[None, :]
    for t in range(schedule.steps, 0, -1):
        pred = predict_denoised(x[None, :], t, m_row, params)[0]
        x = posterior_mean_from_prediction(x, t, pred, schedule)
        if mode == "stochastic" and t > 1:
            x = x + math.sqrt(schedule.sigma2[t]) * rng.standard_normal(params.width)
    return x


def generate_cold_embeddings(
    item_ids,
    conditions: np.ndarray | None,
    params: DenoiserParams,
    schedule: NoiseSchedule,
    seed: int,
    mode: str = "deterministic_mean",
    stream_label: str = "infer",
) -> np.ndarray:
    """Generate embeddings for a list of items, one RNG stream per item.

    Per-item streams make each generated row independent of which other items
    are in the batch, while the denoiser itself runs vectorized across items.
    """
    if mode not in INFERENCE_MODES:
        raise ConfigError(f"unknown inference mode {mode!r}")
    item_ids = list(item_ids)
    n = len(item_ids)
    if n == 0:
        return np.zeros((0, params.width))
    if conditions is not None:
        conditions = np.asarray(conditions, dtype=np.float64)
        if conditions.shape[0] != n:
            raise ConfigError(
                f"{n} items but {conditions.shape[0]} condition rows"
            )
    rngs = [stream_rng(seed, stream_label, item) for item in item_ids]
    x = np.stack([r.standard_normal(params.width) for r in rngs])
    for t in range(schedule.steps, 0, -1):
        pred = predict_denoised(x, t, conditions, params)
        x = posterior_mean_from_prediction(x, t, pred, schedule)
        if mode == "stochastic" and t > 1:
            sd = math.sqrt(schedule.sigma2[t])
            x = x + sd * np.stack([r.standard_normal(params.width) for r in rngs])
    return x


class DenoisingGenerator:
    """Denoiser parameters, schedule, and server-side optimizer in one bundle."""

    def __init__(
        self,
        width: int,
        heads: int,
        cond_dim: int,
        schedule: NoiseSchedule,
        server_lr: float,
        rng: np.random.Generator,
    ) -> None:
        self.params = init_denoiser(width, heads, cond_dim, rng)
        self.schedule = schedule
        self.opt = Adam(server_lr)

    def train_epochs(
        self,
        e0_rows: np.ndarray,
        conditions: np.ndarray,
        rng: np.random.Generator,
        epochs: int,
        batch_size: int,
    ) -> float:
        """Run SGD epochs over the given rows; returns the mean batch loss."""
        if epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {epochs}")
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        n = e0_rows.shape[0]
        if n == 0:
            raise ConfigError("cannot train the denoiser on zero rows")
        tensors = self.params.tensors()
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = order[start : start + batch_size]
                loss, grads = elbo_loss(
                    e0_rows[batch], conditions[batch], self.params, self.schedule, rng
                )
                losses.append(loss)
                self.opt.step(tensors, grads)
        return float(np.mean(losses))

    def generate(
        self,
        item_ids,
        conditions: np.ndarray | None,
        seed: int,
        mode: str | None = None,
        stream_label: str = "infer",
    ) -> np.ndarray:
        return generate_cold_embeddings(
            item_ids,
            conditions,
            self.params,
            self.schedule,
            seed,
            mode or "deterministic_mean",
            stream_label,
        )
