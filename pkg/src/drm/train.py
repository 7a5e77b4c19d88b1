"""Trainers: ERM, balanced-batch training, and the VREx/GroupDRO baselines.

All trainers share one minibatch loop; balanced-batch training is that loop
with every batch routed through the match-and-accept augmentation before the
loss. Random streams are split per purpose (init / batch order / acceptance)
so the augmented run with acceptance forced to zero reproduces plain ERM
bit for bit under a shared seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (MatchIndex, PooledData, Stage1Hyper, Stage1Model,
                   balance_batch, build_match_index, calibrate_acceptance,
                   extract_representations)
from .nn import Mlp, OptimState, cross_entropy_with_grad, optimizer_step, softmax

_INIT_STREAM = 0
_BATCH_STREAM = 1
_ACCEPT_STREAM = 2

LOSSES = ("erm", "vrex", "groupdro")


@dataclass
class TrainerConfig:
    """Hyperparameters for one stage-2 training run.

    algorithm picks the loss; "drm" is shorthand for the ERM loss with both
    balancing flags on. use_tb turns on balanced training batches, use_vb
    marks the run for balanced-validation selection.
    """

    algorithm: str = "erm"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    steps: int = 2000
    hidden: int = 64
    penalty_weight: float = 1.0
    groupdro_eta: float = 1e-2
    seed: int = 0
    use_tb: bool = False
    use_vb: bool = False
    checkpoint_every: int = 50
    z_dim: int = 4
    optimizer: str = "adam"

    def __post_init__(self):
        if self.algorithm == "drm":
            self.algorithm = "erm"
            self.use_tb = True
            self.use_vb = True
        if self.algorithm not in LOSSES:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.penalty_weight < 0 or self.groupdro_eta < 0:
            raise ValueError("penalty parameters must be >= 0")

    def stage1_hyper(self) -> Stage1Hyper:
        return Stage1Hyper(learning_rate=self.learning_rate,
                           weight_decay=self.weight_decay,
                           batch_size=self.batch_size, steps=self.steps,
                           checkpoint_every=self.checkpoint_every)


def evaluate(model: Mlp, data) -> float:
    """Fraction of argmax-correct predictions."""
    if len(data.y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.forward(data.x)
    return float((logits.argmax(axis=1) == data.y).mean())


def penalty_vrex(env_risks) -> float:
    """Population variance of per-environment risks."""
    risks = np.asarray(env_risks, dtype=np.float64)
    if risks.size < 1:
        raise ValueError("need at least one environment risk")
    return float(np.var(risks))


def groupdro_update(weights: np.ndarray, env_risks, eta: float) -> np.ndarray:
    """Exponentiated-weights step: w_e proportional to w_e exp(eta r_e)."""
    weights = np.asarray(weights, dtype=np.float64)
    risks = np.asarray(env_risks, dtype=np.float64)
    if weights.shape != risks.shape:
        raise ValueError("weights and risks must align")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a probability vector")
    out = weights * np.exp(eta * risks)
    return out / out.sum()


def _checkpoint_record(step: int, model: Mlp, eval_sets: dict) -> dict:
    rec = {"step": step}
    for name, data in eval_sets.items():
        rec[f"{name}_acc"] = evaluate(model, data)
    return rec


def _pooled_loss_grads(model: Mlp, x: np.ndarray, y: np.ndarray):
    logits, cache = model.forward_cached(x)
    loss, dlogits = cross_entropy_with_grad(logits, y)
    grads, _ = model.backward_cached(cache, dlogits)
    return loss, grads


def _env_risk_loss_grads(model: Mlp, x: np.ndarray, y: np.ndarray,
                         e: np.ndarray, coeffs_from_risks):
    """Backprop sum_e coeff_e * (mean CE of env e) for per-env risk losses.

    coeffs_from_risks maps the detached per-env risks to per-env gradient
    coefficients (1/E + VREx variance term, or GroupDRO weights).
    """
    logits, cache = model.forward_cached(x)
    probs = softmax(logits)
    n_env = int(e.max()) + 1
    rows = np.arange(len(y))
    nll = -np.log(probs[rows, y])
    risks = np.array([nll[e == env].mean() for env in range(n_env)])
    coeffs, loss = coeffs_from_risks(risks)
    dlogits = probs
    dlogits[rows, y] -= 1.0
    for env in range(n_env):
        mask = e == env
        dlogits[mask] *= coeffs[env] / mask.sum()
    grads, _ = model.backward_cached(cache, dlogits)
    return loss, grads, risks


def _train_loop(config: TrainerConfig, train: PooledData, eval_sets: dict,
                balancer=None):
    """Shared minibatch loop; returns (final model, checkpoint records)."""
    if len(train) == 0:
        raise ValueError("empty training set")
    dims = [train.x.shape[1], config.hidden, config.hidden, train.n_classes]
    init_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _INIT_STREAM]))
    model = Mlp(dims, init_rng)
    opt = OptimState.for_model(model, config.optimizer, config.learning_rate,
                               config.weight_decay)
    batch_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _BATCH_STREAM]))
    stratified = config.algorithm in ("vrex", "groupdro")
    env_indices = [np.nonzero(train.e == env)[0] for env in range(train.n_envs)]
    if stratified and any(idx.size == 0 for idx in env_indices):
        raise ValueError("stratified losses need samples in every environment")
    gdro_weights = np.full(train.n_envs, 1.0 / train.n_envs)
    records = []
    n = len(train)

    def vrex_coeffs(risks):
        k = risks.size
        penalty = penalty_vrex(risks)
        coeffs = (1.0 / k) + config.penalty_weight * 2.0 * (risks - risks.mean()) / k
        return coeffs, float(risks.mean() + config.penalty_weight * penalty)

    def gdro_coeffs(risks):
        nonlocal gdro_weights
        gdro_weights = groupdro_update(gdro_weights, risks, config.groupdro_eta)
        return gdro_weights, float(np.dot(gdro_weights, risks))

    for step in range(1, config.steps + 1):
        if stratified:
            ids = np.concatenate([
                idx[batch_rng.integers(0, idx.size, size=config.batch_size)]
                for idx in env_indices])
        else:
            ids = batch_rng.integers(0, n, size=config.batch_size)
        if balancer is not None:
            ids = balancer(ids)
        xb, yb = train.x[ids], train.y[ids]
        if stratified:
            _, grads, _ = _env_risk_loss_grads(
                model, xb, yb, train.e[ids],
                vrex_coeffs if config.algorithm == "vrex" else gdro_coeffs)
        else:
            _, grads = _pooled_loss_grads(model, xb, yb)
        optimizer_step(model, grads, opt)
        if step % config.checkpoint_every == 0 or step == config.steps:
            records.append(_checkpoint_record(step, model, eval_sets))
    return model, records


def train_erm(config: TrainerConfig, train: PooledData, val: PooledData,
              eval_sets: dict | None = None):
    """Minibatch training on cross-entropy pooled across environments."""
    sets = {"val": val}
    sets.update(eval_sets or {})
    return _train_loop(config, train, sets, balancer=None)


def train_drm(config: TrainerConfig, train: PooledData, val: PooledData,
              stage1: Stage1Model, eval_sets: dict | None = None,
              acceptance: np.ndarray | None = None,
              match_index: MatchIndex | None = None):
    """ERM (or a stratified loss) on balanced batches.

    Identical loop to train_erm except each batch is augmented with accepted
    nearest-opposite-label matches before the loss. Pass acceptance to
    override the calibrated table (zeros reduce the run to plain ERM; ones
    give the unconditional-append variant).
    """
    if match_index is None:
        reps = extract_representations(stage1, train)
        match_index = build_match_index(train, reps)
    if match_index.acceptance is None:
        calibrate_acceptance(match_index)
    table = match_index.acceptance if acceptance is None else np.asarray(acceptance)
    accept_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _ACCEPT_STREAM]))

    def balancer(ids):
        return balance_batch(ids, match_index, table, accept_rng)

    sets = {"val": val}
    sets.update(eval_sets or {})
    return _train_loop(config, train, sets, balancer=balancer)
