"""Acceptance gate: twelve checks covering exact numerics, end-to-end signal
on the synthetic benchmark, privacy direction, robustness, and bitwise
reproducibility.  Each check prints one `[NN/12] name: PASS/FAIL` line.

The heavyweight federated runs are shared through module-scoped fixtures, so
the whole gate stays inside a few minutes.
"""

import itertools
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from fedcold.cli import artifact_sha256, main
from fedcold.config import RunConfig
from fedcold.diffusion import (
    DenoiserParams,
    DenoisingGenerator,
    build_schedule,
    elbo_loss_fixed,
    init_denoiser,
    posterior_mean_from_prediction,
    posterior_stats,
)
from fedcold.evaluation import ndcg_at_k, recall_precision_at_k
from fedcold.federation import bce_loss
from fedcold.mlp import TwoLayerMLP
from fedcold.numerics import finite_diff_grad_check, sigmoid, stream_rng
from fedcold.pipeline import (
    evaluate_run,
    generate_cold,
    prepare_data,
    run_attack,
    run_training,
)
from fedcold.privacy import fano_bound, gaussian_noise_floor, mi_gaussian_estimate

SEEDS = (1, 2, 3)

# Directional checks run on this synthetic benchmark: planted 4-cluster
# structure, 200 users x 130 items, feature noise 0.1, width 64, 50 rounds,
# 40 corruption levels.  The schedule/server knobs are tuned so the denoiser
# is still coarse at round 5 but converged by round 50.  Feature dim 8 keeps
# the per-feature noise energy (dim * noise^2 = 0.08) well below the unit
# cluster-centroid energy, so inverting an embedding back to its feature
# vector is genuinely possible and the deterministic/stochastic leakage gap
# is meaningful rather than both attacks sitting at the noise floor.
BENCHMARK = dict(
    synthetic=True,
    synthetic_users=200,
    synthetic_items=130,
    synthetic_clusters=4,
    synthetic_p_in=0.3,
    synthetic_p_out=0.01,
    synthetic_feature_dim=8,
    synthetic_feature_noise=0.1,
    dim=64,
    rounds=50,
    steps=40,
    local_lr=0.1,
    negatives_per_positive=5,
    server_epochs=5,
    server_lr=1e-3,
    noise_scale=1.0,
    noise_min=0.1,
    noise_max=0.9,
    heads=4,
    k_list=(10, 20, 50),
    mapper_epochs=2000,
    mapper_lr=0.05,
    mi_draws=16,
)


def _verdict(index: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"[{index:2d}/12] {name}: {'PASS' if passed else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    assert passed, line


def _best_generator(cfg: RunConfig, data, result) -> DenoisingGenerator:
    schedule = build_schedule(cfg.steps, cfg.noise_scale, cfg.noise_min, cfg.noise_max)
    gen = DenoisingGenerator(
        width=cfg.dim,
        heads=cfg.heads,
        cond_dim=data.features.dim,
        schedule=schedule,
        server_lr=cfg.server_lr,
        rng=stream_rng(cfg.seed, "denoiser-init"),
    )
    gen.params = DenoiserParams.from_tensors(
        cfg.dim, cfg.heads, data.features.dim, result.best_denoiser
    )
    return gen


def _recall_at_10(cfg: RunConfig, data, result, condition: str) -> float:
    gen = _best_generator(cfg, data, result)
    cfg_c = replace(cfg, condition=condition)
    rows = generate_cold(cfg_c, data, gen, stream_label="infer")
    report = evaluate_run(
        cfg_c, data, result.best_user_table, result.best_item_table, rows
    )
    return report.metrics.per_k[10].recall


def _recall_random_rows(cfg: RunConfig, data, result) -> float:
    rows = stream_rng(cfg.seed, "random-baseline").standard_normal(
        (len(data.split.cold_items), cfg.dim)
    )
    report = evaluate_run(
        cfg, data, result.best_user_table, result.best_item_table, rows
    )
    return report.metrics.per_k[10].recall


@pytest.fixture(scope="module")
def benchmark_runs():
    runs = {}
    for seed in SEEDS:
        cfg = RunConfig(seed=seed, **BENCHMARK)
        data = prepare_data(cfg)
        runs[seed] = (cfg, data, run_training(cfg, data))
    return runs


@pytest.fixture(scope="module")
def ldp_runs():
    runs = {}
    for seed in SEEDS:
        cfg = replace(RunConfig(seed=seed, **BENCHMARK), ldp_scale=10.0)
        data = prepare_data(cfg)
        runs[seed] = (cfg, data, run_training(cfg, data))
    return runs


# 1. schedule endpoints and monotonicity


def test_01_schedule_endpoints_exact():
    start = time.time()
    rng = stream_rng(0, "gate", "schedules")
    worst = 0.0
    for _ in range(1000):
        steps = int(rng.integers(2, 101))
        scale = float(rng.uniform(0.01, 1.0))
        lo = float(rng.uniform(1e-4, 0.5))
        hi = float(rng.uniform(lo + 1e-4, 0.999))
        s = build_schedule(steps, scale, lo, hi)
        worst = max(
            worst,
            abs((1.0 - s.alpha_bar[1]) - scale * lo),
            abs((1.0 - s.alpha_bar[steps]) - scale * hi),
        )
        assert np.all(np.diff(s.alpha_bar) < 0.0)
    _verdict(
        1,
        "schedule endpoints exact, levels strictly decreasing",
        worst < 1e-12,
        f"max endpoint error {worst:.2e}, {time.time() - start:.2f}s",
    )


# 2. reverse-step posterior identities


def test_02_posterior_identities():
    start = time.time()
    rng = stream_rng(0, "gate", "posterior")
    worst_clean, worst_model = 0.0, 0.0
    for schedule in (
        build_schedule(40, 1.0, 0.1, 0.9),
        build_schedule(40, 0.1, 0.001, 0.01),
        build_schedule(7, 0.5, 0.05, 0.6),
    ):
        e0 = rng.standard_normal(16)
        for t in range(1, schedule.steps + 1):
            e_t = math.sqrt(schedule.alpha_bar[t]) * e0
            mean, _ = posterior_stats(e0, e_t, t, schedule)
            expected = math.sqrt(schedule.alpha_bar[t - 1]) * e0
            worst_clean = max(worst_clean, float(np.max(np.abs(mean - expected))))
            model_mean = posterior_mean_from_prediction(e_t, t, e0, schedule)
            worst_model = max(worst_model, float(np.max(np.abs(model_mean - mean))))
    _verdict(
        2,
        "noise-free posterior collapses one level; model mean matches",
        worst_clean < 1e-10 and worst_model < 1e-12,
        f"clean {worst_clean:.2e}, model {worst_model:.2e}, "
        f"{time.time() - start:.2f}s",
    )


# 3. analytic gradients vs finite differences


def test_03_gradient_checks():
    start = time.time()
    rng = stream_rng(0, "gate", "grads")
    reports = {}

    def interaction_loss(params):
        e_u, e_i = params["e_u"], params["e_i"]
        y_hat = float(sigmoid(np.dot(e_u, e_i)))
        return bce_loss(1.0, y_hat), {
            "e_u": (y_hat - 1.0) * e_i,
            "e_i": (y_hat - 1.0) * e_u,
        }

    reports["interaction"] = finite_diff_grad_check(
        interaction_loss,
        {"e_u": rng.standard_normal(6), "e_i": rng.standard_normal(6)},
        h=1e-5,
        tolerance=1e-4,
    )

    denoiser = init_denoiser(8, 2, 6, stream_rng(0, "gate", "denoiser"))
    schedule = build_schedule(5, 1.0, 0.1, 0.5)
    e0 = rng.standard_normal((3, 8))
    m = rng.standard_normal((3, 6))
    t = np.array([1, 3, 5])
    eps = rng.standard_normal((3, 8))

    def denoiser_loss(tensors):
        params = DenoiserParams.from_tensors(8, 2, 6, tensors)
        return elbo_loss_fixed(e0, m, t, eps, params, schedule)

    reports["denoiser"] = finite_diff_grad_check(
        denoiser_loss, denoiser.tensors(), h=1e-5, tolerance=1e-4
    )

    for name, dims in (("mapper", (6, 5, 4)), ("attacker", (8, 5, 10))):
        net = TwoLayerMLP.init(*dims, rng=stream_rng(0, "gate", name))
        x = rng.standard_normal((7, dims[0]))
        y = rng.standard_normal((7, dims[2]))

        def net_loss(tensors, x=x, y=y):
            return TwoLayerMLP.from_tensors(tensors).loss_and_grads(x, y)

        reports[name] = finite_diff_grad_check(
            net_loss, net.tensors(), h=1e-5, tolerance=1e-4
        )

    worst = max(r.max_rel_error for r in reports.values())
    _verdict(
        3,
        "interaction/denoiser/mapper/attacker gradients",
        all(r.passed for r in reports.values()),
        f"worst rel. error {worst:.2e}, {time.time() - start:.2f}s",
    )


# 4. ranking metrics vs exhaustive brute force


def _brute_force(ranking, relevant, k):
    top = ranking[:k]
    hits = sum(1 for item in top if item in relevant)
    recall = hits / len(relevant)
    precision = hits / k
    dcg = 0.0
    for position, item in enumerate(top, start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(position + 1)
    idcg = sum(
        1.0 / math.log2(position + 1)
        for position in range(1, min(len(relevant), k) + 1)
    )
    return recall, precision, dcg / idcg


def test_04_metrics_match_brute_force():
    start = time.time()
    checked = 0
    for n in range(1, 7):
        cutoffs = range(1, n + 1) if n <= 5 else (1, 3, 6)
        for ranking in itertools.permutations(range(n)):
            ranking = list(ranking)
            for size in range(1, n + 1):
                for relevant in itertools.combinations(range(n), size):
                    relevant = set(relevant)
                    for k in cutoffs:
                        want = _brute_force(ranking, relevant, k)
                        got = recall_precision_at_k(ranking, relevant, k)
                        got_ndcg = ndcg_at_k(ranking, relevant, k)
                        assert (got[0], got[1], got_ndcg) == want
                        checked += 1
    _verdict(
        4,
        "recall/precision/ndcg equal brute force on every ranking",
        True,
        f"{checked} cases, {time.time() - start:.2f}s",
    )


# 5. cold-start recommendation signal vs random embeddings


def test_05_cold_recall_doubles_random_baseline(benchmark_runs):
    full, rand_rows = [], []
    for seed in SEEDS:
        cfg, data, result = benchmark_runs[seed]
        full.append(_recall_at_10(cfg, data, result, "full"))
        rand_rows.append(_recall_random_rows(cfg, data, result))
    mean_full = float(np.mean(full))
    mean_rand = float(np.mean(rand_rows))
    _verdict(
        5,
        "cold recall@10 at least doubles the random-embedding baseline",
        mean_full >= 2.0 * mean_rand,
        f"full {mean_full:.3f} vs 2x random {2 * mean_rand:.3f}",
    )


# 6. guidance ablations


def test_06_full_guidance_beats_ablations(benchmark_runs):
    means = {}
    for condition in ("full", "none", "zero", "random"):
        means[condition] = float(
            np.mean(
                [
                    _recall_at_10(*benchmark_runs[seed], condition=condition)
                    for seed in SEEDS
                ]
            )
        )
    passed = all(
        means["full"] > means[c] for c in ("none", "zero", "random")
    )
    _verdict(
        6,
        "full conditioning beats none/zero/random substitutes",
        passed,
        ", ".join(f"{c} {v:.3f}" for c, v in means.items()),
    )


# 7. warm/generated centroid gap shrinks with training


def test_07_centroid_gap_shrinks(benchmark_runs):
    ratios = []
    for seed in SEEDS:
        _, _, result = benchmark_runs[seed]
        by_round = {d.round: d.centroid_distance for d in result.diagnostics}
        ratios.append(by_round[50] / by_round[5])
    _verdict(
        7,
        "round-50 centroid distance under half of round-5",
        all(r < 0.5 for r in ratios),
        "ratios " + ", ".join(f"{r:.3f}" for r in ratios),
    )


# 8. inversion attack directions


def test_08_diffusion_embeddings_resist_inversion(benchmark_runs):
    mse_d, mse_m, pe_d, pe_m, mi_d, mi_m = [], [], [], [], [], []
    for seed in SEEDS:
        cfg, data, result = benchmark_runs[seed]
        gen = _best_generator(cfg, data, result)
        attack = run_attack(cfg, data, gen, result.best_item_table)
        mse_d.append(attack.comparison.diffusion.mse)
        mse_m.append(attack.comparison.mapper.mse)
        pe_d.append(abs(attack.comparison.diffusion.pearson))
        pe_m.append(abs(attack.comparison.mapper.pearson))
        mi_d.append(attack.comparison.mi_diffusion)
        mi_m.append(attack.comparison.mi_mapper)
    means = tuple(float(np.mean(v)) for v in (mse_d, mse_m, pe_d, pe_m, mi_d, mi_m))
    passed = means[0] > means[1] and means[2] < means[3] and means[4] < means[5]
    _verdict(
        8,
        "generator harder to invert than deterministic mapper",
        passed,
        f"mse {means[0]:.4f}>{means[1]:.4f}, |pearson| {means[2]:.3f}<{means[3]:.3f}, "
        f"mi {means[4]:.1f}<{means[5]:.1f} nats",
    )


# 9. information-theoretic calculators


def test_09_information_calculators():
    start = time.time()
    fano_ok = fano_bound(0.0, 4) == 0.5
    floor_err = abs(gaussian_noise_floor(2, 1.0) - math.log(2 * math.pi * math.e))
    rng = stream_rng(0, "gate", "mi-channel")
    x = rng.standard_normal((100_000, 1))
    y = x + rng.standard_normal((100_000, 1))
    mi = mi_gaussian_estimate(x, y)
    mi_err = abs(mi - 0.5 * math.log(2.0))
    _verdict(
        9,
        "fano bound, entropy floor, unit-noise channel",
        fano_ok and floor_err <= 1e-12 and mi_err <= 0.03,
        f"floor err {floor_err:.1e}, mi {mi:.4f} vs {0.5 * math.log(2.0):.4f}, "
        f"{time.time() - start:.2f}s",
    )


# 10. upload-noise robustness


def test_10_ldp_retains_recall(benchmark_runs, ldp_runs):
    clean, noised = [], []
    for seed in SEEDS:
        clean.append(_recall_at_10(*benchmark_runs[seed], condition="full"))
        noised.append(_recall_at_10(*ldp_runs[seed], condition="full"))
    mean_clean = float(np.mean(clean))
    mean_noised = float(np.mean(noised))
    _verdict(
        10,
        "recall@10 with upload noise 10 keeps 60% of the clean value",
        mean_noised >= 0.6 * mean_clean,
        f"noised {mean_noised:.3f} vs threshold {0.6 * mean_clean:.3f}",
    )


# 11. light cadence


def test_11_light_cadence_contract():
    seed = SEEDS[0]
    cfg_light = replace(
        RunConfig(seed=seed, **BENCHMARK), rounds=10, light_mode=True
    )
    data_light = prepare_data(cfg_light)
    result_light = run_training(cfg_light, data_light)
    events = sum(1 for r in result_light.rounds if r.diffusion_loss is not None)

    cfg_full = replace(RunConfig(seed=seed, **BENCHMARK), rounds=10)
    data_full = prepare_data(cfg_full)
    result_full = run_training(cfg_full, data_full)

    recall_light = _recall_at_10(cfg_light, data_light, result_light, "full")
    recall_full = _recall_at_10(cfg_full, data_full, result_full, "full")
    gap = abs(recall_light - recall_full) / recall_full
    _verdict(
        11,
        "light cadence: 5 trainer events in 10 rounds, recall within 30%",
        events == 5 and gap <= 0.3,
        f"events {events}, light {recall_light:.3f} vs full {recall_full:.3f}",
    )


# 12. bitwise reproducibility of the whole command-line pipeline


_PIPELINE_CFG = """
synthetic = true
synthetic_users = 40
synthetic_items = 30
synthetic_clusters = 3
synthetic_feature_dim = 12
dim = 8
rounds = 4
negatives_per_positive = 2
steps = 6
heads = 2
k_list = 5, 10
val_k = 5
leak_fraction = 0.25
attack_epochs = 25
mapper_epochs = 25
mi_draws = 6
struct_sample_n = 3
seed = 5
out_dir = out
"""


def _run_pipeline(base) -> dict[str, str]:
    base.mkdir()
    cfg_path = base / "run.cfg"
    cfg_path.write_text(_PIPELINE_CFG)
    cwd = os.getcwd()
    os.chdir(base)
    try:
        for command in ("gen-data", "train", "infer", "eval", "attack"):
            assert main([command, "--config", str(cfg_path)]) == 0
    finally:
        os.chdir(cwd)
    hashes = {}
    out = base / "out"
    for root, _, files in os.walk(out):
        for name in files:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out)
            hashes[rel] = artifact_sha256(path)
    return hashes


def test_12_pipeline_reruns_bitwise_identical(tmp_path):
    start = time.time()
    first = _run_pipeline(tmp_path / "a")
    second = _run_pipeline(tmp_path / "b")
    same_files = sorted(first) == sorted(second)
    same_bytes = same_files and all(first[k] == second[k] for k in first)
    _verdict(
        12,
        "two identical pipeline runs emit identical artifacts",
        same_files and same_bytes,
        f"{len(first)} artifacts, {time.time() - start:.1f}s",
    )
