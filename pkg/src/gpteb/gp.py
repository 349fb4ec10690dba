"""Gaussian-process models of the per-component dynamics residual.

Each modeled state-derivative component gets its own independent GP with a
squared-exponential ARD kernel and a constant prior mean. The uncertainty seen
by the game is ``mean(s) + e * std(s)`` with ``|e| <= halfwidth``.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import NumericalError

log = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class Observation:
    """One measured residual ``target`` of derivative component ``component`` at ``state``."""

    state: tuple[float, ...]
    target: float
    component: int = 0

    def __post_init__(self):
        object.__setattr__(self, "state", tuple(float(v) for v in self.state))
        if not (all(math.isfinite(v) for v in self.state) and math.isfinite(self.target)):
            raise ValueError("observation entries must be finite")


@dataclass(frozen=True)
class KernelParams:
    signal_var: float
    lengthscales: tuple[float, ...]
    noise_std: float
    prior_mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", tuple(float(v) for v in np.atleast_1d(self.lengthscales)))
        if not self.signal_var > 0:
            raise ValueError("signal variance must be positive")
        if any(not l > 0 for l in self.lengthscales):
            raise ValueError("length scales must be positive")
        if self.noise_std < 0:
            raise ValueError("noise std must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.lengthscales)

    def to_json(self) -> dict:
        return {
            "signal_var": self.signal_var,
            "lengthscales": list(self.lengthscales),
            "noise_std": self.noise_std,
            "prior_mean": self.prior_mean,
        }

    @classmethod
    def from_json(cls, d: dict) -> "KernelParams":
        return cls(d["signal_var"], tuple(d["lengthscales"]), d["noise_std"], d.get("prior_mean", 0.0))


def kernel(a, b, params: KernelParams) -> float:
    """Squared-exponential ARD covariance between two points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.size != params.dim:
        raise ValueError(f"kernel inputs must both have dimension {params.dim}")
    z = (a - b) / np.asarray(params.lengthscales)
    return float(params.signal_var * math.exp(-0.5 * float(z @ z)))


def kernel_matrix(A: np.ndarray, B: np.ndarray, params: KernelParams) -> np.ndarray:
    ell = np.asarray(params.lengthscales)
    A = np.asarray(A, dtype=float) / ell
    B = np.asarray(B, dtype=float) / ell
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return params.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


class GpModel:
    """A fitted (or prior-only) GP over ``inputs`` with cached Cholesky factor.

    Parameters
    ----------
    inputs : array, shape (N, D)
        Training inputs; ``N`` may be zero.
    targets : array, shape (N,)
    params : KernelParams
    """

    def __init__(self, inputs, targets, params: KernelParams, warning: str | None = None):
        X = np.asarray(inputs, dtype=float).reshape(-1, params.dim)
        y = np.asarray(targets, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("inputs and targets disagree in length")
        self.inputs = X
        self.targets = y
        self.params = params
        self.warning = warning
        self.jitter = 0.0
        self.chol = np.zeros((0, 0))
        self.alpha = np.zeros(0)
        if X.shape[0]:
            self._factor()

    def _factor(self):
        p = self.params
        K = kernel_matrix(self.inputs, self.inputs, p)
        K[np.diag_indices_from(K)] += p.noise_std**2
        last = None
        for jit in JITTER_LADDER:
            try:
                L = linalg.cholesky(K + jit * p.signal_var * np.eye(len(K)), lower=True)
            except linalg.LinAlgError as exc:
                last = exc
                continue
            self.chol = L
            self.jitter = jit
            self.alpha = linalg.cho_solve((L, True), self.targets - p.prior_mean)
            return
        raise NumericalError(
            f"covariance not positive definite even with jitter {JITTER_LADDER[-1]:g}*signal_var ({last})"
        )

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.params.dim

    def __repr__(self):
        p = self.params
        return (
            f"GpModel(N={self.n}, sf2={p.signal_var:.4g}, ell={tuple(round(l, 4) for l in p.lengthscales)}, "
            f"sn={p.noise_std:.3g}, mu0={p.prior_mean:.4g})"
        )

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "warning": self.warning,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GpModel":
        params = KernelParams.from_json(d["params"])
        return cls(np.asarray(d["inputs"], dtype=float).reshape(-1, params.dim), d["targets"], params, d.get("warning"))


def log_marginal_likelihood(model: GpModel) -> float:
    """Log evidence of the targets under the model's prior."""
    if model.n == 0:
        return 0.0
    r = model.targets - model.params.prior_mean
    return float(
        -0.5 * r @ model.alpha
        - np.log(np.diag(model.chol)).sum()
        - 0.5 * model.n * math.log(2.0 * math.pi)
    )


def posterior_many(model: GpModel, queries) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation at each row of ``queries``."""
    p = model.params
    Q = np.asarray(queries, dtype=float).reshape(-1, p.dim)
    if model.n == 0:
        return np.full(len(Q), p.prior_mean), np.full(len(Q), math.sqrt(p.signal_var))
    Ks = kernel_matrix(Q, model.inputs, p)
    mean = p.prior_mean + Ks @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = p.signal_var - (v * v).sum(0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def posterior(model: GpModel, query) -> tuple[float, float]:
    q = np.atleast_1d(np.asarray(query, dtype=float))
    if q.size != model.dim or not np.all(np.isfinite(q)):
        raise ValueError(f"query must be a finite vector of dimension {model.dim}")
    m, s = posterior_many(model, q[None, :])
    return float(m[0]), float(s[0])


def _pack(p: KernelParams) -> np.ndarray:
    return np.concatenate(
        [[math.log(p.signal_var)], np.log(p.lengthscales), [math.log(max(p.noise_std, 1e-6))], [p.prior_mean]]
    )


def _unpack(theta: np.ndarray, dim: int) -> KernelParams:
    theta = np.r_[np.clip(theta[: dim + 2], -30.0, 30.0), theta[dim + 2]]
    return KernelParams(
        float(math.exp(theta[0])),
        tuple(np.exp(theta[1 : 1 + dim])),
        float(math.exp(theta[1 + dim])),
        float(theta[2 + dim]),
    )


def data_bounds(S: np.ndarray, y: np.ndarray) -> list[tuple[float, float]]:
    """Search box for the packed hyperparameters, scaled to the data.

    The prior mean stays within the target range, the signal variance at or
    below the sample variance of the targets, and each length scale within
    ``[1e-3, 1e3]`` times the input span. Without it the constant mean and the
    signal variance trade off freely and the prior far from the data is arbitrary.
    """
    var = float(np.var(y)) if len(y) > 1 else 0.0
    var = max(var, 1e-12)
    span = np.ptp(S, axis=0) if len(S) > 1 else np.ones(S.shape[1])
    span = np.where(span > 0, span, 1.0)
    b = [(math.log(var) - 30.0, math.log(var))]
    b += [(math.log(1e-3 * w), math.log(1e3 * w)) for w in span]
    b += [(math.log(1e-6), math.log(1e3))]
    b += [(float(np.min(y)), float(np.max(y)))]
    return b


def fit(
    observations: Sequence[Observation],
    init: KernelParams,
    axes: Sequence[int] | None = None,
    n_starts: int = 4,
    seed: int = 0,
    max_iter: int = 400,
    bounded: bool = True,
) -> GpModel:
    """Maximize the log marginal likelihood by multi-start Nelder-Mead in log space.

    ``axes`` selects which state coordinates feed the GP (all by default). The
    first start is ``init`` itself; the others perturb it. With ``bounded`` the
    search stays in :func:`data_bounds`. The result is never worse than
    ``init``; if every start fails the init-parameter model is returned with
    ``warning`` set.
    """
    if len(observations) == 0:
        raise ValueError("fit needs at least one observation")
    S = np.array([o.state for o in observations], dtype=float)
    if axes is not None:
        S = S[:, list(axes)]
    y = np.array([o.target for o in observations], dtype=float)
    if S.shape[1] != init.dim:
        raise ValueError(f"init has {init.dim} length scales but inputs have {S.shape[1]} columns")
    dim = init.dim

    def nll(theta):
        try:
            m = GpModel(S, y, _unpack(theta, dim))
        except (NumericalError, ValueError):
            return 1e25
        val = -log_marginal_likelihood(m)
        return val if math.isfinite(val) else 1e25

    theta0 = _pack(init)
    bounds = data_bounds(S, y) if bounded else None
    rng = np.random.default_rng(seed)
    starts = [theta0] + [theta0 + rng.normal(0.0, 1.0, theta0.shape) * np.r_[np.ones(dim + 2), 0.0] for _ in range(n_starts - 1)]
    if bounds is not None:
        lo_b = np.array([b[0] for b in bounds])
        hi_b = np.array([b[1] for b in bounds])
        starts = [np.clip(th, lo_b, hi_b) for th in starts]
    best_theta, best_val = None, math.inf
    for th in starts:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = optimize.minimize(
                    nll, th, method="Nelder-Mead", bounds=bounds,
                    options={"maxiter": max_iter * len(th), "xatol": 1e-6, "fatol": 1e-9},
                )
        except Exception as exc:  # optimizer blew up on this start
            log.debug("GP start failed: %s", exc)
            continue
        if res.fun < best_val:
            best_theta, best_val = res.x, res.fun
    try:
        init_val = -log_marginal_likelihood(GpModel(S, y, init))
    except NumericalError:
        init_val = math.inf
    if best_theta is None or best_val >= 1e25:
        return GpModel(S, y, init, warning="hyperparameter optimization failed at every start")
    if init_val <= best_val:
        return GpModel(S, y, init)
    return GpModel(S, y, _unpack(best_theta, dim))


def chance_halfwidth(p: float) -> float:
    """Half-width ``sqrt(2) * erfinv(p)`` of the per-component tuning box.

    erf is inverted by bisection, which is monotone by construction.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"confidence level must lie in [0, 1), got {p}")
    if p == 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while math.erf(hi) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if math.erf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return math.sqrt(2.0) * 0.5 * (lo + hi)


@dataclass
class UncertaintyModel:
    """Independent GPs for a subset of the tracking-state derivative components.

    ``gps`` maps component index -> model; ``active_axes`` are the tracking
    state indices fed to every GP. Exactly one of ``p`` (confidence level) or
    ``sigma_mult`` fixes the half-width of the tuning box.
    """

    gps: dict[int, GpModel]
    active_axes: tuple[int, ...]
    state_dim: int
    p: float | None = None
    sigma_mult: float | None = None
    kind: str = field(default="gp", init=False)

    def __post_init__(self):
        self.active_axes = tuple(int(a) for a in self.active_axes)
        self.gps = {int(k): v for k, v in self.gps.items()}
        if (self.p is None) == (self.sigma_mult is None):
            raise ValueError("set exactly one of p or sigma_mult")
        if self.sigma_mult is not None and self.sigma_mult < 0:
            raise ValueError("sigma_mult must be non-negative")
        if self.p is not None:
            chance_halfwidth(self.p)
        for j, m in self.gps.items():
            if not 0 <= j < self.state_dim:
                raise ValueError(f"component {j} outside state dimension {self.state_dim}")
            if m.dim != len(self.active_axes):
                raise ValueError(f"GP for component {j} expects {m.dim} inputs, active axes give {len(self.active_axes)}")

    @property
    def halfwidth(self) -> float:
        if self.sigma_mult is not None:
            return float(self.sigma_mult)
        return chance_halfwidth(self.p)

    @property
    def components(self) -> tuple[int, ...]:
        return tuple(sorted(self.gps))

    def mean_std(self, states) -> tuple[np.ndarray, np.ndarray]:
        """Per-component means and stds at ``(m, state_dim)`` states (zero where unmodeled)."""
        S = np.atleast_2d(np.asarray(states, dtype=float))
        mean = np.zeros((len(S), self.state_dim))
        std = np.zeros((len(S), self.state_dim))
        X = S[:, list(self.active_axes)]
        for j, m in self.gps.items():
            mean[:, j], std[:, j] = posterior_many(m, X)
        return mean, std

    def to_json(self) -> dict:
        return {
            "kind": "gp",
            "active_axes": list(self.active_axes),
            "state_dim": self.state_dim,
            "p": self.p,
            "sigma_mult": self.sigma_mult,
            "gps": {str(j): m.to_json() for j, m in sorted(self.gps.items())},
        }


@dataclass
class BoxUncertainty:
    """Constant worst-case box ``[lo_j, hi_j]`` per component.

    Expressed in the same mean/std form as :class:`UncertaintyModel` with a
    unit half-width so the game treats both identically.
    """

    lo: dict[int, float]
    hi: dict[int, float]
    state_dim: int
    active_axes: tuple[int, ...] = ()
    kind: str = field(default="box", init=False)
    halfwidth = 1.0

    def __post_init__(self):
        self.lo = {int(k): float(v) for k, v in self.lo.items()}
        self.hi = {int(k): float(v) for k, v in self.hi.items()}
        if set(self.lo) != set(self.hi):
            raise ValueError("box bounds must cover the same components")
        for j in self.lo:
            if self.hi[j] < self.lo[j]:
                raise ValueError(f"component {j}: upper bound below lower bound")

    @property
    def components(self) -> tuple[int, ...]:
        return tuple(sorted(self.lo))

    def mean_std(self, states):
        S = np.atleast_2d(np.asarray(states, dtype=float))
        mean = np.zeros((len(S), self.state_dim))
        std = np.zeros((len(S), self.state_dim))
        for j in self.lo:
            mean[:, j] = 0.5 * (self.lo[j] + self.hi[j])
            std[:, j] = 0.5 * (self.hi[j] - self.lo[j])
        return mean, std

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], components: Sequence[int], state_dim: int):
        lo, hi = {}, {}
        for j in components:
            vals = [o.target for o in observations if o.component == j]
            if not vals:
                raise ValueError(f"no observations for component {j}")
            lo[j], hi[j] = min(vals), max(vals)
        return cls(lo, hi, state_dim)

    def to_json(self) -> dict:
        return {
            "kind": "box",
            "state_dim": self.state_dim,
            "active_axes": list(self.active_axes),
            "lo": {str(j): v for j, v in sorted(self.lo.items())},
            "hi": {str(j): v for j, v in sorted(self.hi.items())},
        }


def evaluate_uncertainty(u, s, e) -> np.ndarray:
    """``mean_j(s) + e_j * std_j(s)`` for every component (zeros where unmodeled).

    ``e`` has one entry per state component; entries must satisfy
    ``|e_j| <= halfwidth``.
    """
    e = np.asarray(e, dtype=float).reshape(-1)
    if e.size != u.state_dim:
        raise ValueError(f"e must have {u.state_dim} entries")
    if np.any(np.abs(e) > u.halfwidth * (1 + 1e-12) + 1e-12):
        raise ValueError(f"e={e.tolist()} lies outside the tuning box of half-width {u.halfwidth:.6g}")
    mean, std = u.mean_std(np.asarray(s, dtype=float)[None, :])
    return mean[0] + e * std[0]


def uncertainty_from_json(d: dict):
    if d["kind"] == "box":
        return BoxUncertainty(d["lo"], d["hi"], d["state_dim"], tuple(d.get("active_axes", ())))
    gps = {int(j): GpModel.from_json(m) for j, m in d["gps"].items()}
    return UncertaintyModel(gps, tuple(d["active_axes"]), d["state_dim"], p=d.get("p"), sigma_mult=d.get("sigma_mult"))


def save_uncertainty(u, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(u.to_json(), fh, indent=1, sort_keys=True)


def load_uncertainty(path):
    with open(path, encoding="utf-8") as fh:
        return uncertainty_from_json(json.load(fh))
