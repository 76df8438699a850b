"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected in ``RESULTS`` and repeated in the terminal
summary by ``conftest.py``, so they appear even without ``-s``.

Criterion 2 runs the full default experiment and takes about ten minutes
on one core.
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
from scipy.stats import spearmanr

from bayesal import al_loop, cli
from bayesal.acquisition import brute_force_coreset, select_cke, select_coreset
from bayesal.config import DEFAULTS, RESOLVED_NAME
from bayesal.data import SyntheticSpec, fit_norm_stats, generate_synthetic, noise_levels
from bayesal.model import (
    TrainConfig,
    epistemic_variance,
    heteroscedastic_value,
    init_params,
    mc_predict,
    mse_value,
    train,
)
from test_acquisition import random_instance
from test_cli import SMOKE
from test_model import check_gradient

RESULTS = []

# the default synthetic task, shared by several criteria
DEFAULT_SPEC = SyntheticSpec(
    n=DEFAULTS.data_n, D=DEFAULTS.data_D, K=DEFAULTS.data_K,
    noise_profile=DEFAULTS.data_noise_profile, noise_sd=DEFAULTS.data_noise_sd,
    feature_dist=DEFAULTS.data_feature_dist,
)
EPOCHS = DEFAULTS.train_epochs


def record(number, name, ok, detail, started):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} ({name}): {detail} [{time.time() - started:.1f}s]"
    RESULTS.append(line)
    print(line)
    return ok


def fit_model(X, Y, seed, *, heteroscedastic=True, mode="A", loss="heteroscedastic"):
    p = init_params(X.shape[1], Y.shape[1] // 3, DEFAULTS.model_hidden, heteroscedastic=heteroscedastic,
                    dropout_mode=mode, dropout_rate=DEFAULTS.model_dropout_rate, seed=seed)
    p, _ = train(p, X, Y, TrainConfig(epochs=EPOCHS, loss_kind=loss, seed=seed))
    return p


def test_criterion_1_gradient_fidelity():
    t = time.time()
    worst = 0.0
    kinds, modes = ("mse", "heteroscedastic"), ("none", "A", "B", "C")
    configs = [(seed, kinds[seed % 2], modes[seed // 2 % 4]) for seed in range(20)]
    for seed, kind, mode in configs:
        worst = max(worst, check_gradient(100 + seed, kind, mode))
    elapsed = time.time() - t
    ok = worst < 1e-4 and elapsed < 60
    assert record(1, "gradient fidelity", ok, f"max rel error {worst:.2e} over {len(configs)} configs", t)


def test_criterion_2_al_ordering():
    t = time.time()
    cfg = DEFAULTS
    report = al_loop.run_experiment(cfg)
    final = {s: report.final(s) for s in cfg.al_strategies}
    (cke, cke_sd), (core, _), (rnd, rnd_sd) = final["cke"], final["coreset"], final["random"]
    gap_sd = max(cke_sd, rnd_sd)
    elapsed = time.time() - t
    ok = cke <= core <= rnd and rnd - cke >= gap_sd and elapsed < 1800
    detail = ", ".join(f"{s} {m:.6f}+/-{sd:.6f}" for s, (m, sd) in final.items())
    assert record(2, "AL ordering", ok, f"{detail}; random-cke {rnd - cke:.6f} vs sd {gap_sd:.6f}", t)


def test_criterion_3_bayesian_vs_standard():
    t = time.time()
    # a noisier variant of the default task
    spec = replace(DEFAULT_SPEC, n=1000, noise_sd=0.2)
    bayes, standard = [], []
    for s in range(5):
        tr = generate_synthetic(spec, 30 + s).dataset
        te = generate_synthetic(replace(spec, n=1000), 40 + s).dataset
        stats = fit_norm_stats(tr.targets)
        Y = stats.normalize(tr.targets)
        b = fit_model(tr.features, Y, s)
        m = fit_model(tr.features, Y, s, heteroscedastic=False, mode="none", loss="mse")
        for model, out, M in ((b, bayes, DEFAULTS.model_M), (m, standard, 1)):
            pred = stats.denormalize(mc_predict(model, te.features, M, seed=s).mean)
            out.append(mse_value(te.targets, pred, te.K))
    ok = np.mean(bayes) <= np.mean(standard) and time.time() - t < 600
    detail = f"bayesian {np.mean(bayes):.6f} vs standard {np.mean(standard):.6f} (mean of 5 seeds)"
    assert record(3, "bayesian vs standard", ok, detail, t)


def test_criterion_4_aleatoric_recovery():
    t = time.time()
    spec = replace(DEFAULT_SPEC, noise_profile="ramp", noise_sd=0.1, feature_dist="uniform")
    tr = generate_synthetic(spec, 1).dataset
    stats = fit_norm_stats(tr.targets)
    p = fit_model(tr.features, stats.normalize(tr.targets), 0)
    X = np.random.default_rng(5).uniform(-1, 1, (500, spec.D))
    X[:, 0] = np.linspace(-1, 1, 500)
    true_sd = noise_levels(spec, X).mean(axis=1)
    pred_sd = np.sqrt(stats.scale_variance(mc_predict(p, X, DEFAULTS.model_M, seed=0).aleatoric_var)).mean(axis=1)
    rho = spearmanr(pred_sd, true_sd).statistic
    ok = rho > 0.8 and time.time() - t < 300
    assert record(4, "aleatoric recovery", ok, f"spearman {rho:.4f}", t)


def test_criterion_5_epistemic_shrinkage():
    t = time.time()
    sizes = (100, 400, 1600)
    totals = np.zeros(len(sizes))
    for s in range(5):
        tr = generate_synthetic(replace(DEFAULT_SPEC, n=max(sizes)), 300 + s).dataset
        pool = generate_synthetic(replace(DEFAULT_SPEC, n=1000), 400 + s).dataset
        stats = fit_norm_stats(tr.targets)
        for i, n in enumerate(sizes):
            p = fit_model(tr.features[:n], stats.normalize(tr.targets[:n]), s)
            totals[i] += mc_predict(p, pool.features, DEFAULTS.model_M, seed=s).epistemic_var.mean() / 5
    ok = bool(np.all(np.diff(totals) < 0)) and time.time() - t < 600
    detail = ", ".join(f"n={n}: {v:.6f}" for n, v in zip(sizes, totals))
    assert record(5, "epistemic shrinkage", ok, detail, t)


def test_criterion_6_selector_oracles():
    t = time.time()
    rng = np.random.default_rng(2024)
    core_bad = cke_bad = 0
    for i in range(1000):
        lab, pool, B = random_instance(rng, dyadic=i % 2 == 1)
        core = select_coreset(lab, pool, B).chosen
        core_bad += core != brute_force_coreset(lab, pool, B)
        cke_bad += select_cke(lab, pool, B, eta=0.0).chosen != core
    ok = core_bad == 0 and cke_bad == 0 and time.time() - t < 60
    detail = f"coreset/oracle mismatches {core_bad}, cke(eta=0)/coreset mismatches {cke_bad} of 1000"
    assert record(6, "selector oracle equivalence", ok, detail, t)


def test_criterion_7_mc_stabilization():
    t = time.time()
    tr = generate_synthetic(replace(DEFAULT_SPEC, n=1000), 10).dataset
    pool = generate_synthetic(replace(DEFAULT_SPEC, n=1000), 20).dataset
    stats = fit_norm_stats(tr.targets)
    p = fit_model(tr.features, stats.normalize(tr.targets), 0)
    # independent mask streams, so the M=40 passes are not a prefix of the M=80 ones
    a = stats.denormalize(mc_predict(p, pool.features, 40, seed=1).mean)
    b = stats.denormalize(mc_predict(p, pool.features, 80, seed=2).mean)
    ratio = np.abs(a - b).mean() / np.abs(b).mean()
    ok = ratio < 0.05 and time.time() - t < 120
    assert record(7, "MC stabilization", ok, f"mean |diff| / mean |pred| = {ratio:.4f}", t)


def test_criterion_8_end_to_end_determinism(tmp_path, monkeypatch):
    t = time.time()
    monkeypatch.delenv("BAYESAL_SEED", raising=False)
    monkeypatch.delenv("BAYESAL_OUTDIR", raising=False)
    digests = []
    for name in ("first", "second"):
        cfg = tmp_path / f"{name}.cfg"
        cfg.write_text(SMOKE + f"output.dir = {tmp_path / 'out'}\n")
        assert cli.main(["run", str(cfg)]) == 0
        digests.append({f: hashlib.sha256((tmp_path / "out" / f).read_bytes()).hexdigest()
                        for f in (al_loop.TRIALS_FILE, al_loop.SUMMARY_FILE, RESOLVED_NAME)})
    ok = digests[0] == digests[1] and time.time() - t < 120
    assert record(8, "end-to-end determinism", ok, f"{len(digests[0])} report files byte-identical: {ok}", t)


def test_criterion_9_spot_values():
    t = time.time()
    het = heteroscedastic_value(np.array([[2.0, 0.0, 0.0]]), np.zeros((1, 3)), np.array([[np.log(4.0)]]), 1)
    ep = float(epistemic_variance(np.array([[1.0], [3.0]]))[0])
    rng = np.random.default_rng(9)
    Y, Yhat = rng.normal(size=(7, 12)), rng.normal(size=(7, 12))
    half = abs(heteroscedastic_value(Y, Yhat, np.zeros((7, 4)), 4) - 0.5 * mse_value(Y, Yhat, 4))
    ok = abs(het - 1.1931) <= 1e-4 and ep == 1.0 and half <= 1e-12
    assert record(9, "spot values", ok, f"loss {het:.6f}, variance {ep}, half-mse gap {half:.1e}", t)
