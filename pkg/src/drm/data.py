"""Correlation-shift environments as feature vectors, plus their latent SCM.

Each environment draws a latent shape class d, flips it into the label y with
probability label_noise, then draws a color bit c agreeing with y with
probability rho. Features concatenate a low-noise one-hot color block with a
noisy shape-prototype block, so the color is the easily learned spurious
attribute and the shape carries the stable signal. The same generative
process, with the continuous noise integrated out of X, is exposed as a
discrete SCM for exact analysis.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .exact import ScmSpec

CANONICAL_RHOS = (0.9, 0.8, 0.1)
CANONICAL_NAMES = ("+90%", "+80%", "-90%")

_PROTO_STREAM = 7_401
_SAMPLE_STREAM = 7_402


@dataclass(frozen=True)
class EnvSpec:
    """Generator parameters for one environment."""

    rho: float
    n: int
    seed: int
    label_noise: float = 0.25
    n_classes: int = 2
    color_dims: int = 2
    shape_dims: int = 14
    color_scale: float = 1.0
    color_noise: float = 0.1
    shape_noise: float = 0.8
    proto_seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"label_noise must be in [0, 1), got {self.label_noise}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.color_dims != self.n_classes:
            raise ValueError("color block is one-hot: color_dims must equal n_classes")
        if self.shape_dims < 2:
            raise ValueError("shape_dims must be >= 2")

    @property
    def dim(self) -> int:
        return self.color_dims + self.shape_dims


@dataclass
class EnvDataset:
    """Sampled environment: features, labels, and hidden diagnostics.

    The latent shape class `digit` and the color bit `color` are stored for
    diagnostics and balancing statistics but are never fed to learners.
    """

    x: np.ndarray          # (n, dim) float64
    y: np.ndarray          # (n,) int64
    env: int
    digit: np.ndarray      # (n,) int64
    color: np.ndarray      # (n,) int64
    spec: EnvSpec

    def __post_init__(self):
        n = self.x.shape[0]
        if not (self.y.shape == self.digit.shape == self.color.shape == (n,)):
            raise ValueError("per-sample arrays disagree in length")

    def __len__(self) -> int:
        return self.x.shape[0]


def shape_prototypes(spec: EnvSpec) -> np.ndarray:
    """Per-class unit prototype vectors, a function of proto_seed only.

    For two classes the prototypes are antipodal (+u, -u) so their separation
    is exactly 2 regardless of the draw; more classes get independent random
    unit vectors.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.proto_seed,
                                                        _PROTO_STREAM]))
    if spec.n_classes == 2:
        u = rng.normal(size=spec.shape_dims)
        u /= np.linalg.norm(u)
        return np.stack([u, -u])
    protos = rng.normal(size=(spec.n_classes, spec.shape_dims))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos


def _flip(values: np.ndarray, keep_prob: float, n_classes: int,
          rng: np.random.Generator) -> np.ndarray:
    """Keep each value with keep_prob, else resample uniformly among the others."""
    flip = rng.random(values.shape[0]) >= keep_prob
    if n_classes == 2:
        return np.where(flip, 1 - values, values)
    shift = rng.integers(1, n_classes, size=values.shape[0])
    return np.where(flip, (values + shift) % n_classes, values)


def make_environment(spec: EnvSpec, env: int = 0) -> EnvDataset:
    """Sample one environment; deterministic given the spec."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed,
                                                        _SAMPLE_STREAM]))
    protos = shape_prototypes(spec)
    digit = rng.integers(0, spec.n_classes, size=spec.n)
    y = _flip(digit, 1.0 - spec.label_noise, spec.n_classes, rng)
    color = _flip(y, spec.rho, spec.n_classes, rng)
    color_block = np.eye(spec.n_classes)[color] * spec.color_scale
    color_block += rng.normal(scale=spec.color_noise,
                              size=(spec.n, spec.color_dims))
    shape_block = protos[digit] + rng.normal(scale=spec.shape_noise,
                                             size=(spec.n, spec.shape_dims))
    x = np.concatenate([color_block, shape_block], axis=1)
    return EnvDataset(x=x, y=y, env=env, digit=digit, color=color, spec=spec)


def _conditional_agreement(rho: float, n_classes: int) -> np.ndarray:
    """Square row-stochastic table with rho on the diagonal."""
    off = (1.0 - rho) / (n_classes - 1)
    table = np.full((n_classes, n_classes), off)
    np.fill_diagonal(table, rho)
    return table


def latent_scm(specs) -> ScmSpec:
    """Discrete SCM underlying one or more environment specs.

    X collapses to the pair (shape class, color); its state index is
    s * n_classes + c. The label prior and the X-mechanism are shared, so the
    specs must agree on everything except rho.
    """
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one spec")
    base = specs[0]
    for other in specs[1:]:
        if (other.label_noise, other.n_classes) != (base.label_noise,
                                                    base.n_classes):
            raise ValueError("environments must share label noise and classes")
    k = base.n_classes
    p_y = np.full(k, 1.0 / k)
    p_z_given_y = np.stack([_conditional_agreement(s.rho, k) for s in specs])
    p_s_given_y = _conditional_agreement(1.0 - base.label_noise, k)
    p_x_given_yz = np.zeros((k, k, k * k))
    for y in range(k):
        for z in range(k):
            for s in range(k):
                p_x_given_yz[y, z, s * k + z] = p_s_given_y[y, s]
    names = [s.name or f"env{i}" for i, s in enumerate(specs)]
    return ScmSpec(p_y, p_z_given_y, p_x_given_yz, env_names=names)


def latent_joint(spec: EnvSpec) -> ScmSpec:
    """Single-environment discrete SCM for one spec."""
    return latent_scm([spec])


def split_train_val(dataset: EnvDataset, ratio: float, seed: int):
    """Disjoint seed-deterministic split with sizes within 1 of ratio * n."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least two samples to split")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7_403]))
    order = rng.permutation(n)
    n_train = int(round(ratio * n))
    n_train = min(max(n_train, 1), n - 1)
    parts = []
    for idx in (order[:n_train], order[n_train:]):
        parts.append(EnvDataset(x=dataset.x[idx], y=dataset.y[idx],
                                env=dataset.env, digit=dataset.digit[idx],
                                color=dataset.color[idx], spec=dataset.spec))
    return parts[0], parts[1]


def canonical_env_specs(n: int, seed: int, label_noise: float = 0.25,
                        rhos=CANONICAL_RHOS, names=CANONICAL_NAMES,
                        **overrides) -> list:
    """The three canonical environments (+90%, +80%, -90%) with shared geometry."""
    seq = np.random.SeedSequence([seed, 7_404])
    child_seeds = seq.generate_state(len(rhos))
    return [EnvSpec(rho=rho, n=n, seed=int(child_seeds[i]),
                    label_noise=label_noise, proto_seed=seed,
                    name=names[i], **overrides)
            for i, rho in enumerate(rhos)]


def export_csv(datasets, path):
    """Write `env,y,d,c,x0,...` rows for external inspection."""
    if isinstance(datasets, EnvDataset):
        datasets = [datasets]
    datasets = list(datasets)
    if not datasets:
        raise ValueError("nothing to export")
    dim = datasets[0].x.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["env", "y", "d", "c"] + [f"x{i}" for i in range(dim)])
        for ds in datasets:
            for i in range(len(ds)):
                writer.writerow([ds.env, int(ds.y[i]), int(ds.digit[i]),
                                 int(ds.color[i])]
                                + [repr(float(v)) for v in ds.x[i]])


def with_n(spec: EnvSpec, n: int) -> EnvSpec:
    return replace(spec, n=n)
