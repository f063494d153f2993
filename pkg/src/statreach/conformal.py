"""Residuals, conformal quantiles and robust conformal inference.

The robust quantile follows robust conformal inference over f-divergence
balls: the requested miscoverage ``eps`` is tightened to an adjusted level
``eps_bar`` (through the worst-case CDF map ``g`` and its inverse), and the
ordinary split-conformal quantile is then taken at ``eps_bar``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "InfeasibleError",
    "FDivergence",
    "TOTAL_VARIATION",
    "KL",
    "DivergenceSpec",
    "ResidualRecord",
    "RobustQuantileResult",
    "component_residuals",
    "residual_matrix",
    "scalar_residuals",
    "conformal_index",
    "conformal_quantile",
    "g_tv",
    "g_tv_inv",
    "g_numeric",
    "g_inv_numeric",
    "adjusted_epsilon",
    "robust_quantile",
    "min_calibration_size",
    "estimate_shift_tv",
    "coverage_delta_tilde",
    "write_residuals_csv",
    "read_residuals_csv",
    "effective_epsilon",
]


class InfeasibleError(ValueError):
    """A (miscoverage, radius, calibration size) combination admits no guarantee.

    ``min_m`` carries the smallest calibration size that would work, when one
    exists.
    """

    def __init__(self, message: str, min_m: Optional[int] = None):
        super().__init__(message)
        self.min_m = min_m


# --------------------------------------------------------------------------
# f-divergences


@dataclass(frozen=True)
class FDivergence:
    """Convex generator ``f`` with ``f(1) = 0``.

    ``recession`` is ``lim_{t->inf} f(t)/t``; it gives the value of the
    perspective ``0 * f(a/0) = a * recession`` (zero when ``a = 0``).
    """

    name: str
    f: Callable[[float], float]
    recession: float


def _tv_f(z: float) -> float:
    return 0.5 * abs(z - 1.0)


def _kl_f(z: float) -> float:
    if z < 0:
        return math.inf
    if z == 0:
        return 0.0
    return z * math.log(z)


TOTAL_VARIATION = FDivergence("total-variation", _tv_f, 0.5)
KL = FDivergence("kl", _kl_f, math.inf)
_GENERATORS = {"total-variation": TOTAL_VARIATION, "tv": TOTAL_VARIATION, "kl": KL}


@dataclass(frozen=True)
class DivergenceSpec:
    kind: str = "total-variation"
    tau: float = 0.0

    def __post_init__(self):
        if self.kind not in _GENERATORS:
            raise ValueError(f"unknown divergence {self.kind!r}")
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.is_tv and self.tau > 1:
            raise ValueError("total-variation radius must be <= 1")

    @property
    def is_tv(self) -> bool:
        return _GENERATORS[self.kind] is TOTAL_VARIATION

    @property
    def generator(self) -> FDivergence:
        return _GENERATORS[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.generator.name, "tau": self.tau}


def _perspective(f: FDivergence, a: float, b: float) -> float:
    # b * f(a / b) with the recession convention at b = 0
    if b > 0:
        return b * f.f(a / b)
    if a == 0:
        return 0.0
    return a * f.recession


def _phi(f: FDivergence, beta: float, z: float) -> float:
    return _perspective(f, z, beta) + _perspective(f, 1.0 - z, 1.0 - beta)


_MAX_BISECT = 200


def g_numeric(f: FDivergence, tau: float, beta: float, tol: float = 1e-13) -> float:
    """Worst-case CDF map ``g(beta) = inf{z in [0,1] : phi_beta(z) <= tau}``.

    ``phi_beta`` is convex with ``phi_beta(beta) = 0``, so the feasible set is
    an interval containing ``beta``; its left end is found by bisection.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if tau == 0 or beta == 0:
        return float(beta)
    if _phi(f, beta, 0.0) <= tau:
        return 0.0
    lo, hi = 0.0, float(beta)
    for _ in range(_MAX_BISECT):
        if hi - lo <= tol:
            return hi
        mid = 0.5 * (lo + hi)
        if _phi(f, beta, mid) <= tau:
            hi = mid
        else:
            lo = mid
    raise ArithmeticError(f"g bisection did not converge (interval {hi - lo:.3e})")


def _g_leq(f: FDivergence, tau: float, beta: float, gamma: float) -> bool:
    # g(beta) <= gamma  <=>  beta <= gamma or gamma is feasible for phi_beta
    if beta <= gamma:
        return True
    return _phi(f, beta, gamma) <= tau


def _g_inv(f: FDivergence, tau: float, gamma: float, tol: float) -> float:
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if _g_leq(f, tau, 1.0, gamma):
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(_MAX_BISECT):
        if hi - lo <= tol:
            return lo
        mid = 0.5 * (lo + hi)
        if _g_leq(f, tau, mid, gamma):
            lo = mid
        else:
            hi = mid
    raise ArithmeticError(f"inverse-g bisection did not converge (interval {hi - lo:.3e})")


def g_inv_numeric(f: FDivergence, tau: float, gamma: float, tol: float = 1e-13) -> float:
    """``g^{-1}(gamma) = sup{beta in (0,1) : g(beta) <= gamma}`` by bisection.

    Raises :class:`InfeasibleError` when the supremum is 1 (the requested
    level cannot be certified under this radius).
    """
    b = _g_inv(f, tau, gamma, tol)
    if b >= 1.0:
        raise InfeasibleError(f"g^-1({gamma}) is undefined for tau={tau}: level not attainable")
    return b


def g_tv(beta: float, tau: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    return max(0.0, beta - tau)


def g_tv_inv(gamma: float, tau: float) -> float:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if gamma >= 1.0 - tau:
        raise InfeasibleError(f"g^-1 undefined: gamma={gamma} >= 1 - tau = {1.0 - tau}")
    return gamma + tau


# --------------------------------------------------------------------------
# residuals


@dataclass
class ResidualRecord:
    """Component-wise absolute prediction errors and their scaled maximum."""

    components: np.ndarray
    scalar: float

    @classmethod
    def from_components(cls, components, alpha) -> "ResidualRecord":
        components = np.asarray(components, dtype=float)
        return cls(components=components, scalar=float(np.max(np.asarray(alpha) * components)))


def residual_matrix(net, trajectories: np.ndarray) -> np.ndarray:
    """``(L, nK)`` matrix of ``|tail - forward(s0)|`` for flattened trajectories."""
    from .surrogate import forward

    trajectories = np.atleast_2d(np.asarray(trajectories, dtype=float))
    n = net.n_in
    if trajectories.shape[1] != n + net.n_out:
        raise ValueError(
            f"trajectory length {trajectories.shape[1]} does not match net (n={n}, nK={net.n_out})"
        )
    return np.abs(trajectories[:, n:] - forward(net, trajectories[:, :n]))


def scalar_residuals(components: np.ndarray, alpha) -> np.ndarray:
    """Trajectory residuals ``R_i = max_j alpha_j R_i^j``."""
    components = np.atleast_2d(components)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (components.shape[1],):
        raise ValueError("alpha must have one entry per residual component")
    if np.any(alpha <= 0):
        raise ValueError("scaling factors must be positive")
    return np.max(components * alpha, axis=1)


def component_residuals(net, alpha, trajectory) -> ResidualRecord:
    comps = residual_matrix(net, np.asarray(trajectory, dtype=float)[None])[0]
    return ResidualRecord.from_components(comps, alpha)


# --------------------------------------------------------------------------
# quantiles


def _snap_ceil(x: float) -> int:
    # ceil that ignores floating-point noise just above an integer
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return int(math.ceil(x))


def conformal_index(m: int, epsilon: float) -> int:
    """``ceil((m + 1)(1 - epsilon))``, never below 1."""
    return max(1, _snap_ceil((m + 1) * (1.0 - epsilon)))


def conformal_quantile(residuals: Sequence[float], epsilon: float) -> float:
    """The ``ceil((m+1)(1-eps))``-th smallest residual, or ``inf`` if that index exceeds m."""
    r = np.asarray(residuals, dtype=float).ravel()
    m = r.size
    if m == 0:
        raise ValueError("empty calibration set")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    ell = conformal_index(m, epsilon)
    if ell > m:
        return math.inf
    return float(np.partition(r, ell - 1)[ell - 1])


def adjusted_epsilon(
    epsilon: float,
    tau: float,
    m: int,
    divergence: str | DivergenceSpec = "total-variation",
    method: str = "auto",
) -> float:
    """Adjusted miscoverage level ``eps_bar`` for a radius-``tau`` ball.

    ``method`` is ``"closed-form"`` (total variation only), ``"numeric"``
    (bisection on ``g``) or ``"auto"``.
    """
    spec = divergence if isinstance(divergence, DivergenceSpec) else DivergenceSpec(divergence, tau)
    if isinstance(divergence, DivergenceSpec) and divergence.tau != tau:
        spec = DivergenceSpec(divergence.kind, tau)
    if m < 1:
        raise ValueError("calibration size m must be >= 1")
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    if method == "auto":
        method = "closed-form" if spec.is_tv else "numeric"
    if method == "closed-form":
        if not spec.is_tv:
            raise ValueError("closed form only exists for total variation")
        if epsilon <= tau:
            raise InfeasibleError(f"epsilon={epsilon} <= tau={tau}: no adjusted level exists")
        beta = 1.0 - epsilon + tau
        if (1.0 + 1.0 / m) * beta > 1.0:
            raise InfeasibleError(
                f"calibration size m={m} too small for epsilon={epsilon}, tau={tau}",
                min_m=_snap_ceil(beta / (1.0 - beta)),
            )
        return max(0.0, 1.0 - (1.0 + 1.0 / m) * beta)
    if method != "numeric":
        raise ValueError(f"unknown method {method!r}")

    f = spec.generator
    tol = 1e-13
    beta = _g_inv(f, tau, 1.0 - epsilon, tol)
    if beta >= 1.0:
        raise InfeasibleError(f"epsilon={epsilon} cannot be certified under tau={tau}")
    stretched = (1.0 + 1.0 / m) * beta
    if stretched > 1.0:
        raise InfeasibleError(
            f"calibration size m={m} too small for epsilon={epsilon}, tau={tau}",
            min_m=_snap_ceil(beta / (1.0 - beta)),
        )
    eps_m = 1.0 - g_numeric(f, tau, stretched, tol)
    return max(0.0, 1.0 - _g_inv(f, tau, 1.0 - eps_m, tol))


def effective_epsilon(epsilon: float, divergence: DivergenceSpec, m: int, method: str = "auto") -> float:
    # no shift: plain split conformal, no extra finite-sample stretch
    if divergence.tau == 0:
        return float(epsilon)
    return adjusted_epsilon(epsilon, divergence.tau, m, divergence, method)


@dataclass
class RobustQuantileResult:
    epsilon: float
    epsilon_bar: float
    m: int
    r_star: float
    divergence: DivergenceSpec

    @property
    def insufficient(self) -> bool:
        """True when the quantile index exceeds m (no finite guarantee)."""
        return math.isinf(self.r_star)

    @property
    def delta(self) -> float:
        return 1.0 - self.epsilon

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "epsilon_bar": self.epsilon_bar,
            "m": self.m,
            "r_star": self.r_star,
            "divergence": self.divergence.to_dict(),
            "insufficient_data": self.insufficient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobustQuantileResult":
        div = d["divergence"]
        return cls(
            epsilon=float(d["epsilon"]),
            epsilon_bar=float(d["epsilon_bar"]),
            m=int(d["m"]),
            r_star=float(d["r_star"]),
            divergence=DivergenceSpec(div["kind"], float(div["tau"])),
        )


def robust_quantile(
    residuals: Sequence[float],
    epsilon: float,
    divergence: DivergenceSpec = DivergenceSpec(),
    method: str = "auto",
) -> RobustQuantileResult:
    """Robust conformal quantile of calibration residuals.

    With ``tau = 0`` this reduces to :func:`conformal_quantile` at ``epsilon``.
    An index beyond ``m`` is reported through ``r_star = inf``
    (``result.insufficient``).
    """
    r = np.asarray(residuals, dtype=float).ravel()
    m = r.size
    if m == 0:
        raise ValueError("empty calibration set")
    eps_bar = effective_epsilon(epsilon, divergence, m, method)
    return RobustQuantileResult(
        epsilon=float(epsilon),
        epsilon_bar=eps_bar,
        m=m,
        r_star=conformal_quantile(r, eps_bar),
        divergence=divergence,
    )


def min_calibration_size(
    delta: float,
    divergence: DivergenceSpec = DivergenceSpec(),
    strict: bool = False,
    cap: int = 10**9,
) -> int:
    """Smallest calibration size allowed for confidence ``delta``.

    The base bound is ``L > ceil(g^{-1}(delta) / (1 - g^{-1}(delta)))``.  With
    ``strict=True`` the size is further increased until the conformal index
    ``ceil((L+1)(1 - eps_bar))`` fits in ``L``, i.e. until the robust quantile
    is finite.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    tau = divergence.tau
    try:
        if divergence.is_tv:
            gi = g_tv_inv(delta, tau)
        else:
            gi = g_inv_numeric(divergence.generator, tau, delta)
    except InfeasibleError as exc:
        raise InfeasibleError(f"delta={delta} is not attainable under tau={tau}") from exc
    if gi >= 1.0:
        raise InfeasibleError(f"delta={delta} is not attainable under tau={tau}")
    L = _snap_ceil(gi / (1.0 - gi)) + 1
    if L > cap:
        raise InfeasibleError(f"required calibration size exceeds cap {cap}")
    if not strict:
        return L

    def fits(size: int) -> bool:
        try:
            eps_bar = effective_epsilon(1.0 - delta, divergence, size)
        except InfeasibleError:
            return False
        return conformal_index(size, eps_bar) <= size

    if fits(L):
        return L
    hi = L
    while not fits(hi):
        hi *= 2
        if hi > cap:
            raise InfeasibleError(f"required calibration size exceeds cap {cap}")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            hi = mid
        else:
            lo = mid
    return hi


# --------------------------------------------------------------------------
# empirical checks


def estimate_shift_tv(residuals_sim, residuals_real, bins: int = 100) -> float:
    """Histogram estimate of the total-variation distance between two samples.

    Both samples are binned on their pooled range with ``bins`` equal cells.
    """
    a = np.asarray(residuals_sim, dtype=float).ravel()
    b = np.asarray(residuals_real, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi == lo:
        return 0.0
    p, _ = np.histogram(a, bins=bins, range=(lo, hi))
    q, _ = np.histogram(b, bins=bins, range=(lo, hi))
    return 0.5 * float(np.abs(p / a.size - q / b.size).sum())


def coverage_delta_tilde(residuals, r_star: float) -> float:
    """Fraction of residuals at or below ``r_star``."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("empty sample")
    return float(np.mean(r <= r_star))


# --------------------------------------------------------------------------
# residual files


def write_residuals_csv(path, components: np.ndarray, scalars: np.ndarray) -> None:
    components = np.atleast_2d(components)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scalar"] + [f"R{j + 1}" for j in range(components.shape[1])])
        for s, row in zip(scalars, components):
            w.writerow([repr(float(s))] + [repr(float(v)) for v in row])


def read_residuals_csv(path):
    """Return ``(components, scalars)``."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[0] != "scalar":
            raise ValueError(f"{path}: not a residual file")
        rows = np.array([[float(v) for v in row] for row in r], dtype=float)
    if rows.size == 0:
        return np.empty((0, len(header) - 1)), np.empty(0)
    return rows[:, 1:], rows[:, 0]
