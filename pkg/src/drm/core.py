"""Two-stage balancing machinery.

Stage 1 learns a spurious-attribute representation by predicting the domain
label from (extractor(x), y): because the attribute and the label screen the
domain off from everything else, the extractor is pushed to expose exactly
the environment-dependent attribute. Stage 2 uses that representation to
pair every sample with its nearest same-environment, opposite-label
neighbor, calibrates a per-class acceptance probability so appended matches
leave the batch label marginal at the training marginal, and builds balanced
batches and balanced validation multisets from it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import Mlp, OptimState, cross_entropy_with_grad, optimizer_step

_INIT_STREAM = 0
_BATCH_STREAM = 1

STAGE1_HIDDEN = 32
DEFAULT_Z_DIM = 4


@dataclass
class PooledData:
    """Samples pooled across environments, tagged with 0-based env positions."""

    x: np.ndarray
    y: np.ndarray
    e: np.ndarray
    digit: np.ndarray
    color: np.ndarray
    n_envs: int
    n_classes: int

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "PooledData":
        return PooledData(self.x[idx], self.y[idx], self.e[idx],
                          self.digit[idx], self.color[idx],
                          self.n_envs, self.n_classes)


def stack_environments(datasets) -> PooledData:
    """Pool environment datasets; the env tag is the position in the list."""
    datasets = list(datasets)
    if not datasets:
        raise ValueError("no environments to stack")
    n_classes = datasets[0].spec.n_classes
    x = np.concatenate([d.x for d in datasets])
    y = np.concatenate([d.y for d in datasets])
    e = np.concatenate([np.full(len(d), i, dtype=np.int64)
                        for i, d in enumerate(datasets)])
    digit = np.concatenate([d.digit for d in datasets])
    color = np.concatenate([d.color for d in datasets])
    return PooledData(x, y, e, digit, color, len(datasets), n_classes)


@dataclass
class Stage1Hyper:
    """Extractor/discriminator training recipe.

    The defaults are the reliable regime for extracting the spurious
    attribute. Nearest-neighbor matching quality additionally depends on how
    much label-correlated stable-feature structure the domain loss imprints
    on the representation, which varies with the learning rate; the sweep
    harness therefore diversifies the stage-1 learning rate across trials
    rather than relying on one value.
    """

    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    steps: int = 2000
    checkpoint_every: int = 50
    hidden: int = STAGE1_HIDDEN


@dataclass
class Stage1Model:
    """Extractor x -> z plus a domain-discriminator head on (z, onehot(y))."""

    extractor: Mlp
    discriminator: Mlp
    z_dim: int
    n_envs: int
    n_classes: int

    def domain_logits(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        z = self.extractor.forward(x)
        head_in = np.concatenate([z, np.eye(self.n_classes)[y]], axis=1)
        return self.discriminator.forward(head_in)


def _domain_accuracy(model: Stage1Model, data: PooledData) -> float:
    logits = model.domain_logits(data.x, data.y)
    return float((logits.argmax(axis=1) == data.e).mean())


def train_stage1(train: PooledData, val: PooledData, z_dim: int = DEFAULT_Z_DIM,
                 hyper: Stage1Hyper | None = None, seed: int = 0):
    """Jointly train extractor and discriminator to predict the domain label.

    Minimizes cross-entropy of the domain prediction on the train pool and
    returns the checkpoint with the highest domain accuracy on the val pool
    (earliest checkpoint wins ties), together with that accuracy.
    """
    if train.n_envs < 2:
        raise ValueError("stage 1 needs at least two training environments")
    hyper = hyper or Stage1Hyper()
    dim = train.x.shape[1]
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_STREAM]))
    extractor = Mlp([dim, hyper.hidden, z_dim], init_rng)
    discriminator = Mlp([z_dim + train.n_classes, hyper.hidden, train.n_envs],
                        init_rng)
    model = Stage1Model(extractor, discriminator, z_dim, train.n_envs,
                        train.n_classes)
    opt_g = OptimState.for_model(extractor, "adam", hyper.learning_rate,
                                 hyper.weight_decay)
    opt_d = OptimState.for_model(discriminator, "adam", hyper.learning_rate,
                                 hyper.weight_decay)
    batch_rng = np.random.default_rng(np.random.SeedSequence([seed, _BATCH_STREAM]))
    onehot = np.eye(train.n_classes)
    best_acc = -1.0
    best = (extractor.copy(), discriminator.copy())
    n = len(train)
    for step in range(1, hyper.steps + 1):
        idx = batch_rng.integers(0, n, size=hyper.batch_size)
        xb, yb, eb = train.x[idx], train.y[idx], train.e[idx]
        z, cache_g = extractor.forward_cached(xb)
        head_in = np.concatenate([z, onehot[yb]], axis=1)
        logits, cache_d = discriminator.forward_cached(head_in)
        _, dlogits = cross_entropy_with_grad(logits, eb)
        grads_d, d_head_in = discriminator.backward_cached(cache_d, dlogits)
        grads_g, _ = extractor.backward_cached(cache_g, d_head_in[:, :z_dim])
        optimizer_step(discriminator, grads_d, opt_d)
        optimizer_step(extractor, grads_g, opt_g)
        if step % hyper.checkpoint_every == 0:
            acc = _domain_accuracy(model, val)
            if acc > best_acc:
                best_acc = acc
                best = (extractor.copy(), discriminator.copy())
    best_model = Stage1Model(best[0], best[1], z_dim, train.n_envs,
                             train.n_classes)
    return best_model, best_acc


def extract_representations(model: Stage1Model, data) -> np.ndarray:
    """Representation z = extractor(x) per sample, order-preserving."""
    x = data.x if hasattr(data, "x") else np.asarray(data)
    return model.extractor.forward(x)


@dataclass
class MatchIndex:
    """Per (environment, class) candidate pools for opposite-label matching.

    opp_ids[(e, y)] holds the sorted sample ids of same-environment samples
    whose label differs from y; opp_reps the matching representation rows.
    label_marginal is the training-set label distribution; matched_freq and
    acceptance are filled in by calibrate_acceptance.
    """

    sample_env: np.ndarray
    sample_y: np.ndarray
    reps: np.ndarray
    opp_ids: dict
    opp_reps: dict
    label_marginal: np.ndarray
    n_classes: int
    matched_freq: np.ndarray | None = None
    acceptance: np.ndarray | None = None
    _match_cache: np.ndarray | None = field(default=None, repr=False)


def build_match_index(data: PooledData, reps: np.ndarray) -> MatchIndex:
    """Index the pooled dataset for nearest-opposite-label lookups."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.shape[0] != len(data):
        raise ValueError("one representation row per sample required")
    opp_ids = {}
    opp_reps = {}
    for env in range(data.n_envs):
        env_mask = data.e == env
        present = np.unique(data.y[env_mask])
        if env_mask.any() and present.size < 2:
            raise ValueError(
                f"environment {env} has a single class; no opposite-label candidates"
            )
        for cls in range(data.n_classes):
            ids = np.nonzero(env_mask & (data.y != cls))[0]
            opp_ids[(env, cls)] = ids
            opp_reps[(env, cls)] = reps[ids]
    label_marginal = np.bincount(data.y, minlength=data.n_classes) / len(data)
    return MatchIndex(sample_env=data.e, sample_y=data.y, reps=reps,
                      opp_ids=opp_ids, opp_reps=opp_reps,
                      label_marginal=label_marginal, n_classes=data.n_classes)


_MATCH_CHUNK = 512


def match_many(index: MatchIndex, ids: np.ndarray) -> np.ndarray:
    """Nearest same-environment opposite-label partner for each query id.

    Euclidean distance on raw representations; exact ties resolve to the
    lowest sample id because pools are stored in ascending id order. Queries
    are chunked so distance blocks stay cache-sized.
    """
    ids = np.asarray(ids, dtype=np.int64)
    out = np.empty(ids.shape[0], dtype=np.int64)
    keys = index.sample_env[ids] * index.n_classes + index.sample_y[ids]
    for key in np.unique(keys):
        env, cls = divmod(int(key), index.n_classes)
        pool_ids = index.opp_ids[(env, cls)]
        if pool_ids.size == 0:
            raise ValueError(f"empty opposite pool for env {env}, class {cls}")
        pool = index.opp_reps[(env, cls)]
        pool_sq = np.sum(pool * pool, axis=1)
        sel = np.nonzero(keys == key)[0]
        for lo in range(0, sel.size, _MATCH_CHUNK):
            chunk = sel[lo:lo + _MATCH_CHUNK]
            q = index.reps[ids[chunk]]
            d2 = (np.sum(q * q, axis=1)[:, None] - 2.0 * (q @ pool.T)
                  + pool_sq[None, :])
            out[chunk] = pool_ids[np.argmin(d2, axis=1)]
    return out


def match(index: MatchIndex, sample_id: int) -> int:
    return int(match_many(index, np.array([sample_id]))[0])


def acceptance_from_frequencies(label_marginal: np.ndarray,
                                matched_freq: np.ndarray) -> np.ndarray:
    """Per-class acceptance a(y) = kappa P_D(y) / M(y), kappa = min M/P_D.

    This is the unique scaling with max a = 1 under which accepted matches,
    drawn with label frequencies M, have expected label distribution exactly
    the training marginal P_D.
    """
    p_d = np.asarray(label_marginal, dtype=np.float64)
    m_hat = np.asarray(matched_freq, dtype=np.float64)
    live = p_d > 0
    if np.any(live & (m_hat == 0)):
        raise ValueError("a class with positive marginal never appears among "
                         "matches; acceptance cannot be calibrated")
    kappa = np.min(m_hat[live] / p_d[live])
    acceptance = np.zeros_like(p_d)
    acceptance[live] = kappa * p_d[live] / m_hat[live]
    return np.minimum(acceptance, 1.0)


def calibrate_acceptance(index: MatchIndex) -> np.ndarray:
    """One full matching pass; fills matched_freq and acceptance on the index."""
    matches = match_many(index, np.arange(index.sample_y.shape[0]))
    index._match_cache = matches
    index.matched_freq = np.bincount(index.sample_y[matches],
                                     minlength=index.n_classes) / matches.shape[0]
    index.acceptance = acceptance_from_frequencies(index.label_marginal,
                                                   index.matched_freq)
    return index.acceptance


def balance_batch(batch_ids: np.ndarray, index: MatchIndex,
                  acceptance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Append each sample's match with probability acceptance[label of match].

    Originals are always retained and come first; accepted matches follow in
    batch order. One uniform draw is consumed per batch sample regardless of
    the acceptance values, so streams stay aligned across variants.
    """
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    matched = match_many(index, batch_ids)
    accept = rng.random(batch_ids.shape[0]) < acceptance[index.sample_y[matched]]
    return np.concatenate([batch_ids, matched[accept]])


def balance_validation(valset: PooledData, stage1: Stage1Model,
                       rng: np.random.Generator) -> PooledData:
    """Balanced validation multiset: valset plus accepted matched partners.

    Builds a match index over the validation set itself, calibrates
    acceptance on it, and appends every accepted match. Deterministic given
    the generator state.
    """
    reps = extract_representations(stage1, valset)
    index = build_match_index(valset, reps)
    acceptance = calibrate_acceptance(index)
    matches = index._match_cache
    accept = rng.random(len(valset)) < acceptance[valset.y[matches]]
    keep = np.concatenate([np.arange(len(valset)), matches[accept]])
    return valset.take(keep)


def binary_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two binary sequences; 0 when either is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def linear_probe_accuracy(features: np.ndarray, targets: np.ndarray) -> float:
    """Accuracy of a least-squares linear probe for a binary target."""
    design = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    signed = 2.0 * targets - 1.0
    coef, *_ = np.linalg.lstsq(design, signed, rcond=None)
    return float(((design @ coef > 0) == (targets == 1)).mean())


def export_representations(path, data: PooledData, reps: np.ndarray):
    """Write `id,env,y,c,z0,...` rows (feeds external projection tools)."""
    reps = np.asarray(reps)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "env", "y", "c"]
                        + [f"z{i}" for i in range(reps.shape[1])])
        for i in range(len(data)):
            writer.writerow([i, int(data.e[i]), int(data.y[i]),
                             int(data.color[i])]
                            + [repr(float(v)) for v in reps[i]])
