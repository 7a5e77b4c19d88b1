"""Acceptance suite: every criterion prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The full-scale sweep
criteria train hundreds of models and take tens of minutes on one core; the
stated runtime ceilings are asserted alongside the accuracy targets.
"""

import time

import numpy as np
import pytest

from drm import exact
from drm.core import (balance_validation, build_match_index,
                      calibrate_acceptance, extract_representations,
                      linear_probe_accuracy, stack_environments, train_stage1)
from drm.data import canonical_env_specs, latent_scm, make_environment, split_train_val
from drm.harness import (SweepConfig, balance_statistics, run_sweep,
                         select_model, summarize, verify_theory,
                         write_records_csv)
from drm.nn import Mlp, grad_check
from drm.train import TrainerConfig, train_drm, train_erm

pytestmark = pytest.mark.acceptance


def _report(criterion, checks):
    """Print one PASS/FAIL line for a criterion, then assert."""
    failed = [f"{label} ({detail})" for label, ok, detail in checks if not ok]
    details = "; ".join(f"{label}={detail}" for label, _, detail in checks)
    verdict = "FAIL" if failed else "PASS"
    print(f"\n[{verdict}] {criterion}: {details}")
    assert not failed, f"{criterion}: " + " | ".join(failed)


def sweep_config(**overrides):
    base = dict(env_names=["+90%", "+80%", "-90%"], rhos=[0.9, 0.8, 0.1],
                master_seed=0, seeds=[0, 1, 2], n_trials=8,
                algorithms=["erm", "erm+vb", "drm"], n_per_env=20000)
    base.update(overrides)
    return SweepConfig(**base)


@pytest.fixture(scope="module")
def full_sweep():
    """3-seed, 8-trial, leave-one-out sweep at n=20000 per environment."""
    records, per_seed_minutes = [], []
    for rep in (0, 1, 2):
        start = time.monotonic()
        records += run_sweep(sweep_config(seeds=[rep]))
        per_seed_minutes.append((time.monotonic() - start) / 60.0)
    return records, per_seed_minutes


def test_criterion_1_theory_suite():
    start = time.monotonic()
    # balanced-distribution identities on random SCMs, exact to 1e-12
    identity_worst = 0.0
    for seed in range(1000):
        scm = exact.random_scm(2, 3, 4, n_envs=1, seed=seed)
        p = exact.joint(scm, 0)
        pb = exact.balance(scm, 0)
        identity_worst = max(
            identity_worst,
            np.abs(pb.marginal("Y").values() - p.marginal("Y").values()).max(),
            np.abs(pb.marginal("Z").values() - p.marginal("Z").values()).max())
        pyz = pb.marginal("Y", "Z").values()
        outer = np.outer(pyz.sum(axis=1), pyz.sum(axis=0))
        identity_worst = max(identity_worst, np.abs(pyz - outer).max())
    # divergence contraction and bound violation rate on random pairs
    rows, summary = verify_theory(n_instances=2000, delta=0.1, m=10000, seed=0)
    elapsed = time.monotonic() - start
    _report("criterion 1: exact theory suite", [
        ("identities<=1e-12", identity_worst <= 1e-12, f"{identity_worst:.2e}"),
        ("passing>=1000", summary["passing"] >= 1000, summary["passing"]),
        ("lemma violations=0", summary["lemma_violations"] == 0,
         summary["lemma_violations"]),
        ("trials>=2000", summary["theorem_trials"] >= 2000,
         summary["theorem_trials"]),
        ("violation rate<=0.1", summary["theorem_violation_rate"] <= 0.1,
         f"{summary['theorem_violation_rate']:.4f}"),
        ("runtime<=120s", elapsed <= 120.0, f"{elapsed:.1f}s"),
    ])


def test_criterion_2_gradient_checks():
    start = time.monotonic()
    rng = np.random.default_rng(10)
    shapes = [[4, 8, 2], [6, 12, 3], [5, 5, 5, 2], [16, 32, 2], [16, 64, 64, 2]]
    worst = 0.0
    for i in range(20):
        model = Mlp(shapes[i % len(shapes)], np.random.default_rng(100 + i))
        x = rng.normal(size=model.layer_dims[0])
        target = int(rng.integers(model.layer_dims[-1]))
        worst = max(worst, grad_check(model, x, target))
    elapsed = time.monotonic() - start
    _report("criterion 2: gradient checks", [
        ("max rel err<=1e-4", worst <= 1e-4, f"{worst:.2e}"),
        ("runtime<=10s", elapsed <= 10.0, f"{elapsed:.1f}s"),
    ])


def test_criterion_3_sweep_accuracies(full_sweep):
    records, minutes = full_sweep
    table = summarize(records, sweep_config())
    rows = {row.algorithm: row for row in table.rows}
    erm, drm = rows["erm"], rows["drm"]
    _report("criterion 3: correlation-shift sweep", [
        ("ERM -90% <= 0.20", erm.means["-90%"] <= 0.20,
         f"{erm.means['-90%']:.3f}"),
        ("DRM -90% >= 0.55", drm.means["-90%"] >= 0.55,
         f"{drm.means['-90%']:.3f}"),
        ("DRM avg >= 0.62", drm.average >= 0.62, f"{drm.average:.3f}"),
        ("|DRM-ERM| +90% <= 0.05",
         abs(drm.means["+90%"] - erm.means["+90%"]) <= 0.05,
         f"{drm.means['+90%']:.3f} vs {erm.means['+90%']:.3f}"),
        ("|DRM-ERM| +80% <= 0.05",
         abs(drm.means["+80%"] - erm.means["+80%"]) <= 0.05,
         f"{drm.means['+80%']:.3f} vs {erm.means['+80%']:.3f}"),
        ("runtime<=20min/seed", max(minutes) <= 20.0,
         f"{max(minutes):.1f}min"),
    ])


def test_criterion_4_balanced_validation_ablation():
    wins = 0
    pairs = []
    for seed in range(10):
        config = sweep_config(seeds=[seed], algorithms=["erm", "erm+vb"],
                              test_envs=["-90%"])
        records = run_sweep(config)
        plain = select_model(records, "plain_val")["test_acc"]
        balanced = select_model(records, "balanced_val")["test_acc"]
        pairs.append((plain, balanced))
        wins += balanced > plain
    detail = " ".join(f"{p:.2f}->{b:.2f}" for p, b in pairs)
    _report("criterion 4: balanced-validation ablation", [
        ("VB wins >= 8/10", wins >= 8, f"{wins}/10: {detail}"),
    ])


def test_criterion_5_balancing_mechanics():
    config = sweep_config(test_env="-90%", n_batches=200)
    stats = balance_statistics(config)
    _report("criterion 5: balancing mechanics", [
        ("mean TV <= 0.05", stats["mean_tv"] <= 0.05,
         f"{stats['mean_tv']:.4f}"),
        ("raw |corr| >= 0.6", abs(stats["raw_color_label_corr"]) >= 0.6,
         f"{stats['raw_color_label_corr']:.3f}"),
        ("balanced |corr| <= 0.2",
         abs(stats["balanced_color_label_corr"]) <= 0.2,
         f"{stats['balanced_color_label_corr']:.3f}"),
    ])


def test_criterion_6_stage1_fidelity():
    specs = canonical_env_specs(20000, seed=0)[:2]
    datasets = [make_environment(s, env=i) for i, s in enumerate(specs)]
    splits = [split_train_val(d, 0.8, seed=1000 + i)
              for i, d in enumerate(datasets)]
    train_pool = stack_environments([s[0] for s in splits])
    val_pool = stack_environments([s[1] for s in splits])
    bayes = exact.bayes_domain_accuracy(latent_scm(specs), [0, 1])
    stage1, acc = train_stage1(train_pool, val_pool, z_dim=4, seed=7)
    reps = extract_representations(stage1, val_pool)
    probe = linear_probe_accuracy(reps, val_pool.color)
    _report("criterion 6: stage-1 fidelity", [
        ("bayes=0.55", abs(bayes - 0.55) <= 1e-12, f"{bayes:.4f}"),
        ("domain acc in [bayes-0.05, bayes+0.03]",
         bayes - 0.05 <= acc <= bayes + 0.03, f"{acc:.4f}"),
        ("color probe >= 0.85", probe >= 0.85, f"{probe:.4f}"),
    ])


def test_criterion_7_reduction_and_reproducibility(tmp_path):
    # balanced training with acceptance forced to zero is bit-exact ERM
    specs = canonical_env_specs(3000, seed=0)[:2]
    datasets = [make_environment(s, env=i) for i, s in enumerate(specs)]
    splits = [split_train_val(d, 0.8, seed=60 + i)
              for i, d in enumerate(datasets)]
    train_pool = stack_environments([s[0] for s in splits])
    val_pool = stack_environments([s[1] for s in splits])
    stage1, _ = train_stage1(train_pool, val_pool, z_dim=4, seed=1)
    cfg = dict(steps=200, learning_rate=2e-3, batch_size=64, hidden=32, seed=2)
    erm_model, erm_records = train_erm(TrainerConfig(**cfg), train_pool,
                                       val_pool)
    drm_model, drm_records = train_drm(TrainerConfig(**cfg), train_pool,
                                       val_pool, stage1,
                                       acceptance=np.zeros(2))
    bit_exact = all(np.array_equal(p, q) for p, q in
                    zip(erm_model.parameters(), drm_model.parameters()))
    # a complete sweep is byte-reproducible under a fixed master seed
    config_kwargs = dict(seeds=[0], n_trials=2, n_per_env=1500, steps=200,
                         algorithms=["erm", "drm"])
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_records_csv(run_sweep(sweep_config(**config_kwargs)), first)
    write_records_csv(run_sweep(sweep_config(**config_kwargs)), second)
    identical = first.read_bytes() == second.read_bytes()
    _report("criterion 7: reduction and reproducibility", [
        ("zero-acceptance run == ERM (bit-exact)", bit_exact, bit_exact),
        ("records match", erm_records == drm_records, True),
        ("sweep CSV byte-identical", identical, identical),
    ])
