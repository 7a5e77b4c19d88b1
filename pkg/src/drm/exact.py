"""Exact discrete-probability engine for the correlation-shift theory.

Works on small structural causal models Y -> Z -> X, Y -> X where the
Z-mechanism varies per environment and the label prior and X-mechanism are
shared. Provides observational joints, balanced (interventional)
distributions, the correlation-shift measure, the marginal-dominance
assumption check, complete- and finite-class H-divergences, 0-1 risks, a
VC generalization bound, and brute-force oracles (subset supremum, VC
dimension by shattering) used to cross-check the closed forms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

ATOL_TABLE = 1e-12
ATOL_INEQ = 1e-9

_STANDARD_AXES = ("X", "Y", "Z")


@dataclass(frozen=True)
class ProbTable:
    """Dense probability table over a finite joint support."""

    axes: tuple
    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        object.__setattr__(self, "table", np.asarray(self.table, dtype=np.float64))
        if self.table.ndim != len(self.axes):
            raise ValueError("table rank does not match axes")
        for name in self.axes:
            if name not in _STANDARD_AXES:
                raise ValueError(f"unknown axis {name!r}")
        if np.any(self.table < 0):
            raise ValueError("negative probability entry")
        total = self.table.sum()
        if abs(total - 1.0) > ATOL_TABLE:
            raise ValueError(f"table sums to {total!r}, not 1")

    def marginal(self, *keep) -> "ProbTable":
        """Marginalize onto the given axes (order preserved as stored)."""
        for name in keep:
            if name not in self.axes:
                raise ValueError(f"axis {name!r} not present")
        keep_idx = [i for i, name in enumerate(self.axes) if name in keep]
        drop_idx = tuple(i for i in range(len(self.axes)) if i not in keep_idx)
        return ProbTable(tuple(self.axes[i] for i in keep_idx),
                         self.table.sum(axis=drop_idx))

    def values(self) -> np.ndarray:
        return self.table


@dataclass
class ScmSpec:
    """Discrete SCM: shared P(Y) and P(X|Y,Z), per-environment P(Z|Y).

    All mechanism rows must be total distributions; in particular P(X|Y,Z)
    must be defined for every (y, z) cell, including pairs that have zero
    probability observationally, because the balancing intervention
    redistributes mass onto them.
    """

    p_y: np.ndarray                    # (ny,)
    p_z_given_y: np.ndarray            # (n_envs, ny, nz)
    p_x_given_yz: np.ndarray           # (ny, nz, nx)
    env_names: list = field(default_factory=list)

    def __post_init__(self):
        self.p_y = np.asarray(self.p_y, dtype=np.float64)
        self.p_z_given_y = np.asarray(self.p_z_given_y, dtype=np.float64)
        self.p_x_given_yz = np.asarray(self.p_x_given_yz, dtype=np.float64)
        if self.p_y.ndim != 1 or self.p_z_given_y.ndim != 3 or self.p_x_given_yz.ndim != 3:
            raise ValueError("mechanism tables have wrong rank")
        ny = self.p_y.shape[0]
        if self.p_z_given_y.shape[1] != ny or self.p_x_given_yz.shape[0] != ny:
            raise ValueError("label-axis sizes disagree across mechanisms")
        if self.p_x_given_yz.shape[1] != self.p_z_given_y.shape[2]:
            raise ValueError("attribute-axis sizes disagree across mechanisms")
        if not self.env_names:
            self.env_names = [f"env{i}" for i in range(self.n_envs)]
        if len(self.env_names) != self.n_envs:
            raise ValueError("env_names length mismatch")
        for name, tab, axis in (("p_y", self.p_y, 0),
                                ("p_z_given_y", self.p_z_given_y, 2),
                                ("p_x_given_yz", self.p_x_given_yz, 2)):
            if np.any(tab < 0):
                raise ValueError(f"{name} has a negative entry")
            sums = tab.sum(axis=axis) if tab.ndim > 1 else tab.sum()
            if np.any(np.abs(sums - 1.0) > ATOL_TABLE):
                raise ValueError(f"{name} rows are not normalized")

    @property
    def n_envs(self) -> int:
        return self.p_z_given_y.shape[0]

    @property
    def ny(self) -> int:
        return self.p_y.shape[0]

    @property
    def nz(self) -> int:
        return self.p_z_given_y.shape[2]

    @property
    def nx(self) -> int:
        return self.p_x_given_yz.shape[2]

    def _check_env(self, env: int):
        if not 0 <= env < self.n_envs:
            raise IndexError(f"environment {env} out of range")

    def z_marginal(self, env: int) -> np.ndarray:
        self._check_env(env)
        return self.p_y @ self.p_z_given_y[env]


@dataclass(frozen=True)
class HypothesisClass:
    """Finite list of predictors given as label rows over the X support."""

    predictions: np.ndarray            # (n_hyp, nx) integer labels
    vc_dim: int | None = None
    names: tuple = ()

    def __post_init__(self):
        preds = np.asarray(self.predictions, dtype=np.int64)
        if preds.ndim != 2 or preds.shape[0] == 0:
            raise ValueError("hypothesis class must be a nonempty (n_hyp, nx) array")
        object.__setattr__(self, "predictions", preds)

    def __len__(self) -> int:
        return self.predictions.shape[0]

    @classmethod
    def complete_binary(cls, nx: int) -> "HypothesisClass":
        """All 2^nx binary labelings of an nx-point support."""
        if nx > 12:
            raise ValueError("complete class is brute-force only up to 12 points")
        rows = np.array([[(mask >> i) & 1 for i in range(nx)]
                         for mask in range(2 ** nx)], dtype=np.int64)
        return cls(rows, vc_dim=nx)


@dataclass
class BoundReport:
    """One evaluation of the balanced-risk generalization bound."""

    seed: int
    holds_assumption1: bool
    lhs: float
    mean_balanced_risk: float
    vc_term: float
    epsilon: float
    lam: float
    rhs: float
    violated: bool
    m: int
    delta: float
    empirical_lambda: bool = True

    def __post_init__(self):
        total = self.mean_balanced_risk + self.vc_term + self.epsilon + self.lam
        if abs(self.rhs - total) > ATOL_TABLE:
            raise ValueError("rhs is not the sum of its components")


def joint(scm: ScmSpec, env: int) -> ProbTable:
    """Observational joint P(x, y, z) = P(y) P(z|y) P(x|y,z)."""
    scm._check_env(env)
    table = np.einsum("y,yz,yzx->xyz", scm.p_y, scm.p_z_given_y[env],
                      scm.p_x_given_yz)
    return ProbTable(("X", "Y", "Z"), table)


def balance(scm: ScmSpec, env: int) -> ProbTable:
    """Balanced distribution P_B(x, y, z) = P(x|y,z) P(z) P(y).

    The intervention fixes Z from its own marginal, severing the Y -> Z
    edge, so Y and Z are exactly independent under the result while both
    single-variable marginals are preserved.
    """
    scm._check_env(env)
    p_z = scm.z_marginal(env)
    table = np.einsum("y,z,yzx->xyz", scm.p_y, p_z, scm.p_x_given_yz)
    return ProbTable(("X", "Y", "Z"), table)


def x_marginal(scm: ScmSpec, env: int, balanced: bool = False) -> np.ndarray:
    dist = balance(scm, env) if balanced else joint(scm, env)
    return dist.marginal("X").values()


def correlation_shift_measure(scm: ScmSpec, env_s: int, env_t: int) -> float:
    """Total conditional-attribute discrepancy between two environments.

    Sums |P_S(z|y) - P_T(z|y)| over labels and over attribute values that
    have positive marginal probability in both environments; zero exactly
    when there is no correlation shift on the common support.
    """
    scm._check_env(env_s)
    scm._check_env(env_t)
    common = (scm.z_marginal(env_s) > 0) & (scm.z_marginal(env_t) > 0)
    diff = np.abs(scm.p_z_given_y[env_s] - scm.p_z_given_y[env_t])
    return float(diff[:, common].sum())


@dataclass(frozen=True)
class Assumption1Result:
    holds: bool
    witness: int | None


def check_assumption1(scm: ScmSpec, env_s: int, env_t: int) -> Assumption1Result:
    """Check that the balanced source marginal never exceeds max(source, target).

    Verifies P_B^S(x) <= max(P^S(x), P^T(x)) pointwise over the X support,
    the premise under which balancing cannot increase the complete-class
    divergence to the target. Returns the first violating x otherwise.
    """
    p_b = x_marginal(scm, env_s, balanced=True)
    cap = np.maximum(x_marginal(scm, env_s), x_marginal(scm, env_t))
    bad = np.nonzero(p_b > cap + ATOL_TABLE)[0]
    if bad.size:
        return Assumption1Result(False, int(bad[0]))
    return Assumption1Result(True, None)


def _as_x_dist(p) -> np.ndarray:
    if isinstance(p, ProbTable):
        if p.axes != ("X",):
            raise ValueError("expected a table over the X axis only")
        p = p.values()
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a one-dimensional distribution")
    return arr


def h_divergence_complete(p, q) -> float:
    """Complete-class divergence 2(sum_x max(p, q) - 1).

    Equals twice the supremum of |p(A) - q(A)| over every subset A of the
    support, i.e. the divergence attained when the hypothesis class contains
    all binary functions.
    """
    p = _as_x_dist(p)
    q = _as_x_dist(q)
    if p.shape != q.shape:
        raise ValueError("support mismatch")
    return max(0.0, 2.0 * (np.maximum(p, q).sum() - 1.0))


def h_divergence_brute_force(p, q) -> float:
    """Subset-supremum oracle: 2 max_A |p(A) - q(A)| over all 2^n subsets."""
    p = _as_x_dist(p)
    q = _as_x_dist(q)
    if p.shape != q.shape:
        raise ValueError("support mismatch")
    n = p.shape[0]
    if n > 16:
        raise ValueError("brute force limited to supports of size <= 16")
    best = 0.0
    for mask in range(2 ** n):
        sel = [(mask >> i) & 1 for i in range(n)]
        gap = abs(float(np.dot(sel, p) - np.dot(sel, q)))
        best = max(best, gap)
    return 2.0 * best


def h_divergence_finite(p, q, hclass: HypothesisClass, positive_class: int = 1) -> float:
    """Divergence 2 max_h |p(h=pos) - q(h=pos)| over a finite class."""
    p = _as_x_dist(p)
    q = _as_x_dist(q)
    if p.shape != q.shape:
        raise ValueError("support mismatch")
    if hclass.predictions.shape[1] != p.shape[0]:
        raise ValueError("hypothesis support does not match distribution support")
    ind = (hclass.predictions == positive_class).astype(np.float64)
    return float(2.0 * np.max(np.abs(ind @ p - ind @ q)))


def _as_predictions(h, nx: int) -> np.ndarray:
    arr = np.asarray(h, dtype=np.int64)
    if arr.shape != (nx,):
        raise ValueError(f"predictor must assign a label to each of {nx} states")
    return arr


def risk(h, scm: ScmSpec, env: int) -> float:
    """0-1 risk of predictor h under the observational joint."""
    pred = _as_predictions(h, scm.nx)
    pxy = joint(scm, env).marginal("X", "Y").values()
    mismatch = pred[:, None] != np.arange(scm.ny)[None, :]
    return float((pxy * mismatch).sum())


def risk_balanced(h, scm: ScmSpec, env: int) -> float:
    """0-1 risk of predictor h under the balanced distribution."""
    pred = _as_predictions(h, scm.nx)
    pxy = balance(scm, env).marginal("X", "Y").values()
    mismatch = pred[:, None] != np.arange(scm.ny)[None, :]
    return float((pxy * mismatch).sum())


def vc_bound_term(d: int, m: int, delta: float) -> float:
    """sqrt((4/m) (d ln(2 e m / d) + ln(4 / delta))), natural logarithm."""
    if int(d) != d or d < 1:
        raise ValueError("d must be an integer >= 1")
    if int(m) != m or m < d:
        raise ValueError("m must be an integer >= d")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    d, m = int(d), int(m)
    return float(np.sqrt((4.0 / m) * (d * np.log(2.0 * np.e * m / d)
                                      + np.log(4.0 / delta))))


def vc_dimension(hclass: HypothesisClass, support_size: int) -> int:
    """VC dimension of a finite binary class by brute-force shattering."""
    preds = hclass.predictions
    if preds.shape[1] != support_size:
        raise ValueError("support size does not match hypothesis class")
    if support_size > 12:
        raise ValueError("brute-force shattering limited to supports of size <= 12")
    uniq = np.unique(preds)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError("VC computation expects binary 0/1 predictions")
    # More than 2^k distinct rows are needed to shatter a k-subset.
    max_k = min(support_size, int(np.log2(max(len(hclass), 1))) + 1)
    for k in range(max_k, 0, -1):
        for subset in itertools.combinations(range(support_size), k):
            patterns = {tuple(row) for row in preds[:, subset]}
            if len(patterns) == 2 ** k:
                return k
    return 0


def lambda_term(hclass: HypothesisClass, scm: ScmSpec, test_env: int,
                train_envs, balanced_risks: np.ndarray) -> float:
    """min_h [ test risk(h) + mean of supplied balanced training risks(h) ]."""
    train_envs = list(train_envs)
    balanced_risks = np.asarray(balanced_risks, dtype=np.float64)
    if balanced_risks.shape != (len(hclass), len(train_envs)):
        raise ValueError("balanced_risks must be (n_hyp, n_train_envs)")
    totals = [risk(hclass.predictions[i], scm, test_env) + balanced_risks[i].mean()
              for i in range(len(hclass))]
    return float(min(totals))


def lambda_term_population(hclass: HypothesisClass, scm: ScmSpec, test_env: int,
                           train_envs) -> float:
    """Population-risk variant of lambda_term (no sampling involved)."""
    train_envs = list(train_envs)
    risks = np.array([[risk_balanced(hclass.predictions[i], scm, e)
                       for e in train_envs] for i in range(len(hclass))])
    return lambda_term(hclass, scm, test_env, train_envs, risks)


def _draw_balanced_samples(scm: ScmSpec, train_envs, m: int,
                           rng: np.random.Generator):
    """Draw m samples, each from a uniformly chosen balanced training table.

    Returns per-environment (xs, ys) index arrays.
    """
    train_envs = list(train_envs)
    n_s = len(train_envs)
    counts = np.bincount(rng.integers(0, n_s, size=m), minlength=n_s)
    if np.any(counts == 0):
        raise ValueError("m too small: an environment received no samples")
    out = []
    for env, k in zip(train_envs, counts):
        pxy = balance(scm, env).marginal("X", "Y").values().reshape(-1)
        flat = rng.choice(pxy.size, size=int(k), p=pxy)
        out.append((flat // scm.ny, flat % scm.ny))
    return out


def _empirical_balanced_risks(hclass: HypothesisClass, samples) -> np.ndarray:
    """(n_hyp, n_envs) empirical 0-1 risks on pre-drawn balanced samples."""
    cols = []
    for xs, ys in samples:
        cols.append((hclass.predictions[:, xs] != ys[None, :]).mean(axis=1))
    return np.stack(cols, axis=1)


def _class_epsilon(hclass: HypothesisClass, scm: ScmSpec, train_envs,
                   test_env: int, positive_class: int = 1) -> float:
    px_t = x_marginal(scm, test_env)
    return max(h_divergence_finite(x_marginal(scm, e), px_t, hclass,
                                   positive_class)
               for e in train_envs)


def theorem1_check(h, hclass: HypothesisClass, scm: ScmSpec, train_envs,
                   test_env: int, m: int, delta: float, seed: int) -> BoundReport:
    """Evaluate the balanced-risk bound for one predictor.

    Draws m samples uniformly across the balanced training tables, computes
    per-environment empirical balanced risks, and assembles
    rhs = mean balanced risk + VC term + epsilon + lambda, with lambda taken
    at the same empirical sample. The violation flag compares the exact
    population test risk against the rhs.
    """
    reports = theorem1_check_class(hclass, scm, train_envs, test_env, m,
                                   delta, seed, extra_h=h)
    return reports[-1]


def theorem1_check_class(hclass: HypothesisClass, scm: ScmSpec, train_envs,
                         test_env: int, m: int, delta: float, seed: int,
                         extra_h=None) -> list:
    """Bound reports for every hypothesis in the class on one shared draw.

    The bound quantifies over the whole class for a single sample, so sharing
    one draw across hypotheses is the faithful reading; it is also what the
    Monte Carlo violation-rate estimate needs. When extra_h is given it is
    appended as a final report evaluated on the same draw.
    """
    train_envs = list(train_envs)
    if not train_envs:
        raise ValueError("need at least one training environment")
    holds = all(check_assumption1(scm, e, test_env).holds for e in train_envs)
    d = hclass.vc_dim if hclass.vc_dim is not None else vc_dimension(hclass, scm.nx)
    rng = np.random.default_rng(seed)
    samples = _draw_balanced_samples(scm, train_envs, m, rng)
    emp = _empirical_balanced_risks(hclass, samples)
    test_risks = np.array([risk(hclass.predictions[i], scm, test_env)
                           for i in range(len(hclass))])
    lam = float(np.min(test_risks + emp.mean(axis=1)))
    eps = _class_epsilon(hclass, scm, train_envs, test_env)
    vc = vc_bound_term(d, m, delta)

    def report_for(pred, lhs, mean_rb):
        rhs = mean_rb + vc + eps + lam
        return BoundReport(seed=seed, holds_assumption1=holds, lhs=lhs,
                           mean_balanced_risk=mean_rb, vc_term=vc, epsilon=eps,
                           lam=lam, rhs=rhs, violated=bool(lhs > rhs), m=m,
                           delta=delta)

    reports = [report_for(hclass.predictions[i], float(test_risks[i]),
                          float(emp[i].mean()))
               for i in range(len(hclass))]
    if extra_h is not None:
        pred = _as_predictions(extra_h, scm.nx)
        extra_emp = np.array([(pred[xs] != ys).mean() for xs, ys in samples])
        reports.append(report_for(pred, risk(pred, scm, test_env),
                                  float(extra_emp.mean())))
    return reports


def random_scm(n_y: int, n_z: int, n_x: int, n_envs: int, seed: int,
               concentration: float = 1.0) -> ScmSpec:
    """Random SCM with flat-Dirichlet mechanism rows.

    The label prior and the X-mechanism are shared across environments; only
    the per-environment Z-mechanism varies, which is exactly the
    correlation-shift premise.
    """
    for name, size in (("n_y", n_y), ("n_z", n_z), ("n_x", n_x)):
        if not 2 <= size <= 8:
            raise ValueError(f"{name} must be in [2, 8]")
    if n_envs < 1:
        raise ValueError("need at least one environment")
    rng = np.random.default_rng(seed)
    p_y = rng.dirichlet(np.full(n_y, concentration))
    p_z_given_y = rng.dirichlet(np.full(n_z, concentration),
                                size=(n_envs, n_y))
    p_x_given_yz = rng.dirichlet(np.full(n_x, concentration),
                                 size=(n_y, n_z))
    return ScmSpec(p_y, p_z_given_y, p_x_given_yz)


def bayes_domain_accuracy(scm: ScmSpec, envs) -> float:
    """Best achievable accuracy at predicting the environment from (x, y).

    Environments are taken equally likely; the optimum picks the
    highest-likelihood environment per (x, y) cell.
    """
    envs = list(envs)
    stacked = np.stack([joint(scm, e).marginal("X", "Y").values() for e in envs])
    return float(stacked.max(axis=0).sum() / len(envs))


def bayes_label_accuracy(scm: ScmSpec, env: int) -> float:
    """Best achievable accuracy at predicting the label from x alone."""
    pxy = joint(scm, env).marginal("X", "Y").values()
    return float(pxy.max(axis=1).sum())
