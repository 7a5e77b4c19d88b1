"""Experiment orchestration: random search, leave-one-out sweeps, selection.

Follows the usual domain-generalization protocol: per held-out test
environment, train on the rest, sample hyperparameters randomly per trial,
record every checkpoint's plain-validation, balanced-validation, and test
accuracy, and select checkpoints on validation data only (test accuracy is
recorded for reporting, never for selection). Also hosts the config-file
parser and the theory-verification entry point.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import exact
from .core import (Stage1Hyper, balance_validation, balance_batch,
                   binary_correlation, build_match_index, calibrate_acceptance,
                   extract_representations, stack_environments, train_stage1)
from .data import EnvSpec, make_environment, split_train_val
from .exact import random_scm, theorem1_check_class
from .train import TrainerConfig, train_drm, train_erm

RECORD_FIELDS = ["seed", "test_env", "algorithm", "use_tb", "trial", "step",
                 "learning_rate", "weight_decay", "batch_size", "hidden",
                 "stage1_val_acc", "val_acc", "val_balanced_acc", "test_acc"]
_INT_FIELDS = {"seed", "use_tb", "trial", "step", "batch_size", "hidden"}
_STR_FIELDS = {"test_env", "algorithm"}

BOUND_FIELDS = ["seed", "holds_assumption1", "lhs", "rhs", "mean_Rb",
                "vc_term", "epsilon", "lambda", "violated"]

SELECTION_MODES = ("plain_val", "balanced_val")
_SELECTION_KEY = {"plain_val": "val_acc", "balanced_val": "val_balanced_acc"}

STAGE1_LR_GRID = (1e-3, 3e-3, 1e-2, 3e-2)


@dataclass
class SweepConfig:
    """Parsed experiment configuration (see parse_config for the file format)."""

    env_names: list
    rhos: list
    env_n: list = None
    master_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_trials: int = 8
    algorithms: list = field(default_factory=lambda: ["erm", "drm"])
    selection: str = "plain_val"
    n_per_env: int = 20000
    label_noise: float = 0.25
    split_ratio: float = 0.8
    steps: int = 2000
    checkpoint_every: int = 50
    z_dim: int = 4
    share_stage1: bool = False
    n_batches: int = 200
    color_noise: float = 0.1
    shape_noise: float = 0.8
    color_scale: float = 1.0
    shape_dims: int = 14
    test_env: str = ""
    test_envs: list = None
    algorithm: str = ""
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    hidden: int = 64

    def __post_init__(self):
        if len(self.env_names) != len(self.rhos):
            raise ValueError("one rho per environment required")
        if self.env_n is None:
            self.env_n = [None] * len(self.rhos)
        if self.test_envs is None:
            self.test_envs = list(self.env_names)
        for name in self.test_envs:
            if name not in self.env_names:
                raise ValueError(f"unknown test environment {name!r}")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"unknown selection mode {self.selection!r}")

    def env_index(self, name: str) -> int:
        if name not in self.env_names:
            raise ValueError(f"unknown environment {name!r}")
        return self.env_names.index(name)


_GLOBAL_KEYS = {
    "master_seed": int, "n_trials": int, "n_per_env": int, "steps": int,
    "checkpoint_every": int, "z_dim": int, "n_batches": int, "shape_dims": int,
    "batch_size": int, "hidden": int,
    "label_noise": float, "split_ratio": float, "color_noise": float,
    "shape_noise": float, "color_scale": float, "learning_rate": float,
    "weight_decay": float,
    "selection": str, "test_env": str, "algorithm": str,
    "share_stage1": bool,
    "seeds": "int_list", "algorithms": "str_list", "test_envs": "str_list",
}
_ENV_KEYS = {"rho": float, "n": int}


def _convert(key, kind, raw):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if kind == "int_list":
        return [int(v) for v in raw.split(",") if v.strip() != ""]
    if kind == "str_list":
        return [v.strip() for v in raw.split(",") if v.strip() != ""]
    return kind(raw)


def parse_config(text: str) -> SweepConfig:
    """Parse the flat key=value config format with [env NAME] blocks.

    Unknown keys are rejected. '#' starts a comment; blank lines are ignored.
    """
    fields = {}
    env_names, rhos, env_n = [], [], []
    current = None  # None = global section, else env position
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip()
            if not header.startswith("env "):
                raise ValueError(f"line {lineno}: unknown section {header!r}")
            env_names.append(header[4:].strip())
            rhos.append(None)
            env_n.append(None)
            current = len(env_names) - 1
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if current is None:
            if key not in _GLOBAL_KEYS:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            fields[key] = _convert(key, _GLOBAL_KEYS[key], raw)
        else:
            if key not in _ENV_KEYS:
                raise ValueError(f"line {lineno}: unknown env key {key!r}")
            value = _convert(key, _ENV_KEYS[key], raw)
            if key == "rho":
                rhos[current] = value
            else:
                env_n[current] = value
    if not env_names:
        raise ValueError("config declares no [env ...] blocks")
    if any(r is None for r in rhos):
        missing = env_names[rhos.index(None)]
        raise ValueError(f"environment {missing!r} has no rho")
    return SweepConfig(env_names=env_names, rhos=rhos, env_n=env_n, **fields)


def _seed_int(*keys) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def env_specs(config: SweepConfig, rep_seed: int) -> list:
    """Environment specs for one repetition; prototypes are fixed per master seed."""
    specs = []
    for i, (name, rho) in enumerate(zip(config.env_names, config.rhos)):
        n = config.env_n[i] or config.n_per_env
        specs.append(EnvSpec(
            rho=rho, n=n, seed=_seed_int(config.master_seed, rep_seed, 100 + i),
            label_noise=config.label_noise, proto_seed=config.master_seed,
            shape_dims=config.shape_dims, color_noise=config.color_noise,
            shape_noise=config.shape_noise, color_scale=config.color_scale,
            name=name))
    return specs


def parse_algorithm(spec: str):
    """'erm', 'erm+vb', 'drm' (= erm+vb+tb), 'vrex+vb+tb', ... -> (base, tb, vb)."""
    parts = spec.strip().lower().split("+")
    base, flags = parts[0], set(parts[1:])
    if base == "drm":
        base = "erm"
        flags |= {"vb", "tb"}
    if base not in ("erm", "vrex", "groupdro"):
        raise ValueError(f"unknown algorithm {spec!r}")
    if not flags <= {"vb", "tb"}:
        raise ValueError(f"unknown flags in {spec!r}")
    return base, "tb" in flags, "vb" in flags


def sample_hparams(base: str, rng: np.random.Generator) -> dict:
    """Random-search distributions, drawn in a fixed order."""
    hp = {
        "learning_rate": float(10.0 ** rng.uniform(-4, -2)),
        "weight_decay": float(10.0 ** rng.uniform(-6, -2)),
        "batch_size": int(rng.choice(np.array([32, 64, 128]))),
        "hidden": int(rng.choice(np.array([32, 64, 128]))),
    }
    if base == "vrex":
        hp["penalty_weight"] = float(10.0 ** rng.uniform(-1, 2))
    if base == "groupdro":
        hp["groupdro_eta"] = float(10.0 ** rng.uniform(-3, -1))
    return hp


_VB_CANDIDATE_LRS = (1e-3, 3e-3, 1e-2, 1e-2)


def _self_fit_score(multiset, seed: int) -> float:
    """Held-out accuracy of a small model fit on the multiset itself.

    Measures how much learnable label structure survives balancing. Among
    candidate multisets that all decorrelate the spurious attribute, the
    score ranks how well each matching preserved the stable signal.
    """
    even = multiset.take(np.arange(0, len(multiset), 2))
    odd = multiset.take(np.arange(1, len(multiset), 2))
    probe = TrainerConfig(algorithm="erm", steps=400, learning_rate=3e-3,
                          batch_size=64, hidden=32, checkpoint_every=400,
                          seed=seed)
    _, records = train_erm(probe, even, odd)
    return records[-1]["val_acc"]


def _build_balanced_validation(config: SweepConfig, train_pool, val_pool,
                               seed_keys):
    """Stage-1 model and balanced validation multiset for model selection.

    Built once per (seed, test environment) so every trial is scored on the
    same multiset: if each trial balanced validation with its own stage-1
    model, a trial whose extractor failed would leave the spurious
    correlation in its own validation multiset and inflate its own score.
    Several stage-1 candidates are trained (all in the regime that reliably
    extracts the spurious attribute) and the multiset with the highest
    self-fit score is kept, because matching that leaks the stable feature
    cancels the stable signal among appended partners and blunts selection.
    """
    best = None
    for k, lr in enumerate(_VB_CANDIDATE_LRS):
        hyper = Stage1Hyper(learning_rate=lr, batch_size=128,
                            steps=config.steps,
                            checkpoint_every=config.checkpoint_every)
        stage1, s1_acc = train_stage1(train_pool, val_pool, config.z_dim,
                                      hyper, seed=_seed_int(*seed_keys, 300, k))
        rng = np.random.default_rng(
            np.random.SeedSequence([*seed_keys, 301, k]))
        multiset = balance_validation(val_pool, stage1, rng)
        score = _self_fit_score(multiset, seed=_seed_int(*seed_keys, 302, k))
        if best is None or score > best[0]:
            best = (score, stage1, s1_acc, multiset)
    return best[1], best[2], best[3]


def _run_trial(config: SweepConfig, base: str, use_tb: bool, hp: dict,
               train_pool, val_pool, test_set, balanced_val, seed_keys,
               stage1_override=None):
    """Train the trial's stage 1 and run one stage-2 trial."""
    trainer = TrainerConfig(algorithm=base, steps=config.steps,
                            checkpoint_every=config.checkpoint_every,
                            z_dim=config.z_dim, use_tb=use_tb,
                            seed=_seed_int(*seed_keys, 1), **hp)
    eval_sets = {"val_balanced": balanced_val, "test": test_set}
    if not use_tb:
        _, ckpts = train_erm(trainer, train_pool, val_pool, eval_sets)
        return ckpts, float("nan")
    if stage1_override is None:
        # Stage 1 cycles its own learning-rate grid across trials instead of
        # inheriting the sampled stage-2 rate: cool runs extract the
        # attribute most reliably, hot runs keep the matching ranking freest
        # of stable-feature leakage, and balanced-validation selection picks
        # whichever trial's combination worked.
        trial = seed_keys[-1]
        s1_hyper = Stage1Hyper(
            learning_rate=STAGE1_LR_GRID[trial % len(STAGE1_LR_GRID)],
            batch_size=128, steps=config.steps,
            checkpoint_every=config.checkpoint_every)
        stage1, s1_acc = train_stage1(train_pool, val_pool, config.z_dim,
                                      s1_hyper, seed=_seed_int(*seed_keys, 2))
    else:
        stage1, s1_acc = stage1_override
    _, ckpts = train_drm(trainer, train_pool, val_pool, stage1, eval_sets)
    return ckpts, s1_acc


def run_sweep(config: SweepConfig) -> list:
    """Leave-one-domain-out random search; returns flat checkpoint records."""
    if len(config.env_names) < 2:
        raise ValueError("a sweep needs at least two environments")
    combos = sorted({parse_algorithm(a)[:2] for a in config.algorithms})
    records = []
    for rep in config.seeds:
        specs = env_specs(config, rep)
        datasets = [make_environment(spec, env=i) for i, spec in enumerate(specs)]
        for test_name in config.test_envs:
            test_idx = config.env_index(test_name)
            train_idx = [i for i in range(len(specs)) if i != test_idx]
            splits = [split_train_val(datasets[i], config.split_ratio,
                                      _seed_int(config.master_seed, rep, 200 + i))
                      for i in train_idx]
            train_pool = stack_environments([s[0] for s in splits])
            val_pool = stack_environments([s[1] for s in splits])
            test_set = datasets[test_idx]
            vb_keys = (config.master_seed, rep, test_idx)
            vb_stage1, vb_s1_acc, balanced_val = _build_balanced_validation(
                config, train_pool, val_pool, vb_keys)
            shared_stage1 = (vb_stage1, vb_s1_acc) if config.share_stage1 else None
            for base, use_tb in combos:
                base_idx = ("erm", "vrex", "groupdro").index(base)
                for trial in range(config.n_trials):
                    seed_keys = (config.master_seed, rep, test_idx, base_idx,
                                 int(use_tb), trial)
                    hp_rng = np.random.default_rng(
                        np.random.SeedSequence([*seed_keys, 0]))
                    hp = sample_hparams(base, hp_rng)
                    ckpts, s1_acc = _run_trial(config, base, use_tb, hp,
                                               train_pool, val_pool, test_set,
                                               balanced_val, seed_keys,
                                               stage1_override=shared_stage1)
                    for ck in ckpts:
                        records.append({
                            "seed": rep, "test_env": test_name,
                            "algorithm": base, "use_tb": int(use_tb),
                            "trial": trial, "step": ck["step"],
                            "learning_rate": hp["learning_rate"],
                            "weight_decay": hp["weight_decay"],
                            "batch_size": hp["batch_size"],
                            "hidden": hp["hidden"],
                            "stage1_val_acc": s1_acc,
                            "val_acc": ck["val_acc"],
                            "val_balanced_acc": ck["val_balanced_acc"],
                            "test_acc": ck["test_acc"],
                        })
    return records


def select_model(records, mode: str) -> dict:
    """Checkpoint with the best validation accuracy under the given mode.

    Pure function of validation fields: ties break to the earliest
    checkpoint, then the lowest trial id. Test accuracy is never consulted.
    """
    if mode not in _SELECTION_KEY:
        raise ValueError(f"unknown selection mode {mode!r}")
    rows = list(records)
    if not rows:
        raise ValueError("no records to select from")
    key = _SELECTION_KEY[mode]
    return min(rows, key=lambda r: (-r[key], r["step"], r["trial"]))


def _filter(records, **match):
    return [r for r in records if all(r[k] == v for k, v in match.items())]


@dataclass
class ResultRow:
    algorithm: str
    means: dict
    stderrs: dict
    minimum: float
    average: float
    incomplete: bool


@dataclass
class ResultTable:
    env_names: list
    rows: list


def summarize(records, config: SweepConfig) -> ResultTable:
    """Aggregate selected test accuracies into the Min/Avg result table."""
    rows = []
    for alg in config.algorithms:
        base, use_tb, use_vb = parse_algorithm(alg)
        mode = "balanced_val" if use_vb else config.selection
        means, stderrs = {}, {}
        for env in config.env_names:
            picks = []
            for rep in config.seeds:
                group = _filter(records, algorithm=base, use_tb=int(use_tb),
                                test_env=env, seed=rep)
                if group:
                    picks.append(select_model(group, mode)["test_acc"])
            if picks:
                arr = np.array(picks)
                means[env] = float(arr.mean())
                stderrs[env] = float(arr.std(ddof=1) / np.sqrt(len(arr))
                                     if len(arr) > 1 else 0.0)
        present = [means[e] for e in config.env_names if e in means]
        if not present:
            raise ValueError(f"no records for algorithm {alg!r}")
        rows.append(ResultRow(
            algorithm=alg, means=means, stderrs=stderrs,
            minimum=float(min(present)),
            average=float(np.mean(present)),
            incomplete=len(present) < len(config.env_names)))
    return ResultTable(env_names=list(config.env_names), rows=rows)


def result_table_csv(table: ResultTable) -> str:
    """Serialize a result table; header follows env order, % stripped."""
    cols = [name.replace("%", "") for name in table.env_names]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["algorithm"] + [f"env_{c}" for c in cols]
                    + ["min", "avg"] + [f"stderr_{c}" for c in cols]
                    + ["incomplete"])
    for row in table.rows:
        cells = [repr(row.means[e]) if e in row.means else ""
                 for e in table.env_names]
        errs = [repr(row.stderrs[e]) if e in row.stderrs else ""
                for e in table.env_names]
        writer.writerow([row.algorithm] + cells
                        + [repr(row.minimum), repr(row.average)] + errs
                        + [int(row.incomplete)])
    return buf.getvalue()


def report(records, config: SweepConfig, out_path=None) -> ResultTable:
    """Result table plus optional CSV, from raw sweep records."""
    table = summarize(records, config)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(result_table_csv(table))
    return table


def write_records_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for rec in records:
            row = []
            for name in RECORD_FIELDS:
                value = rec[name]
                row.append(repr(value) if isinstance(value, float) else value)
            writer.writerow(row)


def read_records_csv(path) -> list:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            parsed = {}
            for name in RECORD_FIELDS:
                raw = rec[name]
                if name in _STR_FIELDS:
                    parsed[name] = raw
                elif name in _INT_FIELDS:
                    parsed[name] = int(raw)
                else:
                    parsed[name] = float(raw)
            records.append(parsed)
    return records


_THEORY_SIZES = ((2, 2, 2), (2, 2, 3), (2, 3, 3), (2, 3, 4), (3, 2, 4))


def verify_theory(n_instances: int, delta: float, m: int, seed: int,
                  sizes=_THEORY_SIZES, max_draws: int | None = None):
    """Random-SCM verification of the balancing theory.

    Draws random two-environment SCMs until n_instances pass the
    marginal-dominance assumption (pairs that fail are reported and skipped).
    For every passing pair it asserts the complete-class divergence
    contraction and evaluates the generalization bound for the complete
    binary hypothesis class on one shared sample draw. Returns (rows,
    summary) where rows serialize one bound report per hypothesis.
    """
    if max_draws is None:
        max_draws = 400 * n_instances
    rows, lemma_gaps = [], []
    n_pass = lemma_violations = theorem_violations = theorem_trials = 0
    draw = 0
    while n_pass < n_instances and draw < max_draws:
        ny, nz, nx = sizes[draw % len(sizes)]
        scm_seed = _seed_int(seed, draw)
        scm = random_scm(ny, nz, nx, n_envs=2, seed=scm_seed)
        a1 = exact.check_assumption1(scm, 0, 1)
        draw += 1
        if not a1.holds:
            rows.append({"seed": scm_seed, "holds_assumption1": 0,
                         "lhs": "", "rhs": "", "mean_Rb": "", "vc_term": "",
                         "epsilon": "", "lambda": "", "violated": ""})
            continue
        n_pass += 1
        balanced = exact.h_divergence_complete(
            exact.x_marginal(scm, 0, balanced=True), exact.x_marginal(scm, 1))
        raw = exact.h_divergence_complete(
            exact.x_marginal(scm, 0), exact.x_marginal(scm, 1))
        lemma_gaps.append(raw - balanced)
        if balanced > raw + exact.ATOL_INEQ:
            lemma_violations += 1
        hclass = exact.HypothesisClass.complete_binary(nx)
        reports = theorem1_check_class(hclass, scm, [0], 1, m, delta,
                                       seed=_seed_int(seed, draw, 1))
        theorem_trials += 1
        if any(rep.violated for rep in reports):
            theorem_violations += 1
        for rep in reports:
            rows.append({"seed": scm_seed,
                         "holds_assumption1": int(rep.holds_assumption1),
                         "lhs": rep.lhs, "rhs": rep.rhs,
                         "mean_Rb": rep.mean_balanced_risk,
                         "vc_term": rep.vc_term, "epsilon": rep.epsilon,
                         "lambda": rep.lam, "violated": int(rep.violated)})
    summary = {
        "draws": draw,
        "passing": n_pass,
        "lemma_checked": n_pass,
        "lemma_violations": lemma_violations,
        "min_lemma_gap": float(min(lemma_gaps)) if lemma_gaps else float("nan"),
        "theorem_trials": theorem_trials,
        "theorem_violations": theorem_violations,
        "theorem_violation_rate": (theorem_violations / theorem_trials
                                   if theorem_trials else float("nan")),
    }
    return rows, summary


def write_bound_rows_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOUND_FIELDS)
        for rec in rows:
            out = []
            for name in BOUND_FIELDS:
                value = rec[name]
                out.append(repr(value) if isinstance(value, float) else value)
            writer.writerow(out)


def balance_statistics(config: SweepConfig, rep_seed: int | None = None) -> dict:
    """Batch-marginal and decorrelation statistics on the training pool.

    Trains stage 1 with default hyperparameters on the training environments
    (all environments except test_env when set), calibrates matching, draws
    n_batches raw and balanced batches, and reports the mean total-variation
    distance between batch label marginals and the training marginal plus the
    pooled color-label correlation before and after balancing.
    """
    rep = config.seeds[0] if rep_seed is None else rep_seed
    specs = env_specs(config, rep)
    exclude = config.env_index(config.test_env) if config.test_env else None
    keep = [i for i in range(len(specs)) if i != exclude]
    if len(keep) < 2:
        raise ValueError("balancing statistics need at least two training environments")
    datasets = [make_environment(specs[i], env=pos)
                for pos, i in enumerate(keep)]
    splits = [split_train_val(d, config.split_ratio,
                              _seed_int(config.master_seed, rep, 200 + i))
              for i, d in zip(keep, datasets)]
    train_pool = stack_environments([s[0] for s in splits])
    val_pool = stack_environments([s[1] for s in splits])
    stage1, s1_acc = train_stage1(
        train_pool, val_pool, config.z_dim,
        Stage1Hyper(steps=config.steps, checkpoint_every=config.checkpoint_every),
        seed=_seed_int(config.master_seed, rep, 400))
    reps = extract_representations(stage1, train_pool)
    index = build_match_index(train_pool, reps)
    acceptance = calibrate_acceptance(index)
    rng = np.random.default_rng(
        np.random.SeedSequence([config.master_seed, rep, 401]))
    p_d = index.label_marginal
    tvs = []
    raw_ids, bal_ids = [], []
    for _ in range(config.n_batches):
        ids = rng.integers(0, len(train_pool), size=config.batch_size)
        augmented = balance_batch(ids, index, acceptance, rng)
        marginal = np.bincount(train_pool.y[augmented],
                               minlength=train_pool.n_classes) / augmented.size
        tvs.append(0.5 * np.abs(marginal - p_d).sum())
        raw_ids.append(ids)
        bal_ids.append(augmented)
    raw_all = np.concatenate(raw_ids)
    bal_all = np.concatenate(bal_ids)
    return {
        "stage1_val_acc": s1_acc,
        "acceptance": acceptance.tolist(),
        "mean_tv": float(np.mean(tvs)),
        "raw_color_label_corr": binary_correlation(train_pool.color[raw_all],
                                                   train_pool.y[raw_all]),
        "balanced_color_label_corr": binary_correlation(train_pool.color[bal_all],
                                                        train_pool.y[bal_all]),
    }
