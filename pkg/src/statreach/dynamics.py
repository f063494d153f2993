"""Benchmark stochastic systems, trajectory simulation and trajectory datasets.

Every model is a deterministic update rule plus additive Gaussian noise
``N(0, diag(noise_cov))`` applied once per sampling step.  Trajectories are
stored flattened as ``[s_0, s_1, ..., s_K]`` so that component ``j`` of the
tail (1-based) is state component ``(j - 1) % n + 1`` at step ``ceil(j / n)``.

Randomness is drawn from one counter-based (Philox) substream per trajectory,
spawned from a single seed, so datasets are reproducible and independent of
how the work is chunked.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

__all__ = [
    "SimulationError",
    "SystemModel",
    "InitialSet",
    "ShiftSpec",
    "TrajectoryDataset",
    "get_model",
    "default_initial_set",
    "apply_shift",
    "simulate",
    "simulate_batch",
    "sample_dataset",
    "write_dataset_csv",
    "read_dataset_csv",
    "MODELS",
]


class SimulationError(ValueError):
    """Raised when a trajectory leaves the finite reals.

    ``step`` is the (1-based) time step at which the state became non-finite.
    """

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


# --------------------------------------------------------------------------
# deterministic parts of the built-in systems (all vectorised over rows)


def _periodic2d_map(s: np.ndarray) -> np.ndarray:
    x, y = s[:, 0], s[:, 1]
    xn = 0.985 * y + np.sin(0.5 * x) - 0.6 * np.sin(x + y) - 0.07
    yn = 0.985 * x + np.cos(0.5 * y) - 0.6 * np.cos(x + y) - 0.07
    return np.stack([xn, yn], axis=1)


TRVDP_MU = -1.0


def _trvdp_field(s: np.ndarray) -> np.ndarray:
    x1, x2 = s[:, 0], s[:, 1]
    return np.stack([x2, TRVDP_MU * x2 * (1.0 - x1**2) - x1], axis=1)


# Hover controller gains.  Altitude: PD on x3 with the thrust channel.
# Attitude: PD on roll/pitch towards a set-point that damps lateral velocity.
HOVER_GAINS = {
    "k_z": 2.0,       # altitude position gain
    "k_vz": 3.0,      # altitude rate gain
    "k_att": 4.0,     # roll/pitch angle gain
    "k_rate": 4.0,    # roll/pitch rate gain
    "k_vel": 0.5,     # lateral velocity gain (sets the attitude set-point)
}

_G = 9.81
_THRUST_GAIN = 1.4
_TORQUE_GAIN = 18.5185


def _hover_controller(s: np.ndarray) -> np.ndarray:
    g = HOVER_GAINS
    x4, x5, x6 = s[:, 3], s[:, 4], s[:, 5]
    x7, x8 = s[:, 6], s[:, 7]
    x10, x11 = s[:, 9], s[:, 10]
    # vertical rate from the kinematics (same expression as dx3/dt)
    z_rate = np.sin(x8) * x4 - np.sin(x7) * np.cos(x8) * x5 - np.cos(x7) * np.cos(x8) * x6
    u1 = _THRUST_GAIN * (-g["k_z"] * s[:, 2] - g["k_vz"] * z_rate)
    roll_ref = -g["k_vel"] * x5 / _G
    pitch_ref = g["k_vel"] * x4 / _G
    u2 = -(g["k_att"] * (x7 - roll_ref) + g["k_rate"] * x10) / _TORQUE_GAIN
    u3 = -(g["k_att"] * (x8 - pitch_ref) + g["k_rate"] * x11) / _TORQUE_GAIN
    return np.stack([u1, u2, u3], axis=1)


def _quadcopter_field(s: np.ndarray, controller: Optional[str]) -> np.ndarray:
    if controller == "hover":
        u = _hover_controller(s)
    else:
        u = np.zeros((s.shape[0], 3))
    x4, x5, x6, x7, x8, x9, x10, x11, x12 = (s[:, i] for i in range(3, 12))
    c7, s7 = np.cos(x7), np.sin(x7)
    c8, s8 = np.cos(x8), np.sin(x8)
    c9, s9 = np.cos(x9), np.sin(x9)
    t8 = s8 / c8
    out = np.empty_like(s)
    out[:, 0] = c8 * c9 * x4 + (s7 * s8 * c9 - c7 * s9) * x5 + (c7 * s8 * c9 + s7 * s9) * x6
    out[:, 1] = c8 * s9 * x4 + (s7 * s8 * s9 + c7 * c9) * x5 + (c7 * s8 * s9 - s7 * c9) * x6
    out[:, 2] = s8 * x4 - s7 * c8 * x5 - c7 * c8 * x6
    out[:, 3] = x12 * x5 - x11 * x6 - _G * s8
    out[:, 4] = x10 * x6 - x12 * x4 + _G * c8 * s7
    out[:, 5] = x11 * x4 - x10 * x5 + _G * c8 * c7 - _G - u[:, 0] / _THRUST_GAIN
    out[:, 6] = x10 + s7 * t8 * x11 + c7 * t8 * x12
    out[:, 7] = c7 * x11 - s7 * x12
    out[:, 8] = (s7 / c8) * x11 + (c7 / c8) * x12
    out[:, 9] = -0.9259 * x11 * x12 + _TORQUE_GAIN * u[:, 1]
    out[:, 10] = 0.9259 * x10 * x12 + _TORQUE_GAIN * u[:, 2]
    out[:, 11] = 0.0
    return out


# --------------------------------------------------------------------------
# model description


@dataclass(frozen=True)
class SystemModel:
    """A named stochastic system.

    ``kind`` is ``"difference"`` (the update rule is applied as is) or
    ``"ode"`` (the vector field is integrated over ``dt`` with ``integrator``).
    ``noise_position`` says where the per-step Gaussian draw ``v`` enters:
    ``"after"`` adds it to the state after the deterministic step,
    ``"before"`` adds it to the state before the step, and ``"field"`` (ode
    only) adds it to the vector field, held constant over the step, so the
    state moves by roughly ``dt * v``.
    """

    name: str
    n: int
    kind: str
    noise_cov: tuple
    dt: float = 1.0
    integrator: str = "rk4"
    controller: Optional[str] = None
    noise_position: str = "after"
    tag: str = "sim"

    def __post_init__(self):
        if self.name not in MODELS:
            raise ValueError(f"unknown model {self.name!r}; choose from {sorted(MODELS)}")
        expected = MODELS[self.name]["n"]
        if self.n != expected:
            raise ValueError(f"{self.name} has state dimension {expected}, got n={self.n}")
        if self.kind not in ("difference", "ode"):
            raise ValueError(f"kind must be 'difference' or 'ode', got {self.kind!r}")
        if len(self.noise_cov) != self.n:
            raise ValueError("noise_cov must have one entry per state component")
        if any(not np.isfinite(v) or v < 0 for v in self.noise_cov):
            raise ValueError("noise_cov entries must be finite and >= 0")
        if self.kind == "ode":
            if not self.dt > 0:
                raise ValueError("dt must be positive for ode models")
            if self.integrator not in ("euler", "rk4"):
                raise ValueError(f"integrator must be 'euler' or 'rk4', got {self.integrator!r}")
        if self.noise_position not in ("after", "before", "field"):
            raise ValueError("noise_position must be 'after', 'before' or 'field'")
        if self.noise_position == "field" and self.kind != "ode":
            raise ValueError("noise_position='field' needs an ode model")

    @property
    def noise_std(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.noise_cov, dtype=float))

    @property
    def label(self) -> str:
        return self.name if self.tag == "sim" else f"{self.name}@{self.tag}"

    def step(self, states: np.ndarray, field_noise: Optional[np.ndarray] = None) -> np.ndarray:
        """One sampling step for a batch of states.

        ``field_noise`` is only used with ``noise_position="field"``; otherwise
        this is the deterministic part of the step.
        """
        spec = MODELS[self.name]
        if self.kind == "difference":
            return spec["map"](states)
        if field_noise is None:
            f: Callable[[np.ndarray], np.ndarray] = lambda s: spec["field"](s, self.controller)
        else:
            f = lambda s: spec["field"](s, self.controller) + field_noise
        h = self.dt
        if self.integrator == "euler":
            return states + h * f(states)
        k1 = f(states)
        k2 = f(states + 0.5 * h * k1)
        k3 = f(states + 0.5 * h * k2)
        k4 = f(states + h * k3)
        return states + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def without_noise(self) -> "SystemModel":
        return dataclasses.replace(self, noise_cov=(0.0,) * self.n)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise_cov"] = list(self.noise_cov)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemModel":
        d = dict(d)
        d["noise_cov"] = tuple(float(v) for v in d["noise_cov"])
        return cls(**d)


MODELS = {
    "periodic2d": {
        "n": 2,
        "map": _periodic2d_map,
        "defaults": dict(kind="difference", noise_cov=(0.01**2, 0.01**2)),
    },
    "trvdp": {
        "n": 2,
        "field": lambda s, _c: _trvdp_field(s),
        "defaults": dict(
            kind="ode", dt=0.02, integrator="euler", noise_position="field", noise_cov=(0.1**2, 0.1**2)
        ),
    },
    "quadcopter12d": {
        "n": 12,
        "field": _quadcopter_field,
        "defaults": dict(
            kind="ode",
            dt=0.05,
            integrator="rk4",
            controller="hover",
            noise_position="field",
            noise_cov=tuple([0.05**2] * 6 + [0.01**2] * 6),
        ),
    },
}


def get_model(name: str, **overrides) -> SystemModel:
    """Build a built-in model with its default parameters, optionally overridden."""
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    params = dict(MODELS[name]["defaults"])
    params.update(overrides)
    if "noise_cov" in params:
        params["noise_cov"] = tuple(float(v) for v in params["noise_cov"])
    return SystemModel(name=name, n=MODELS[name]["n"], **params)


@dataclass(frozen=True)
class ShiftSpec:
    """Distribution shift applied to a model's noise.

    Either multiply the covariance by ``noise_scale`` or replace it by
    ``noise_cov``.
    """

    noise_scale: Optional[float] = None
    noise_cov: Optional[tuple] = None

    def to_dict(self) -> dict:
        return {
            "noise_scale": self.noise_scale,
            "noise_cov": None if self.noise_cov is None else list(self.noise_cov),
        }

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ShiftSpec":
        if not d:
            return cls(noise_scale=1.0)
        cov = d.get("noise_cov")
        return cls(
            noise_scale=d.get("noise_scale"),
            noise_cov=None if cov is None else tuple(float(v) for v in cov),
        )


def apply_shift(model: SystemModel, shift: ShiftSpec) -> SystemModel:
    """Return ``model`` with its noise covariance scaled or replaced."""
    if shift.noise_cov is not None:
        cov = tuple(float(v) for v in shift.noise_cov)
        if len(cov) != model.n:
            raise ValueError("replacement covariance has the wrong dimension")
        if any(v < 0 for v in cov):
            raise ValueError("replacement covariance entries must be >= 0")
        tag = "shift(cov=" + ",".join(f"{v:.6g}" for v in cov) + ")"
    else:
        scale = 1.0 if shift.noise_scale is None else float(shift.noise_scale)
        if not scale >= 0:
            raise ValueError(f"noise_scale must be nonnegative, got {scale}")
        cov = tuple(scale * v for v in model.noise_cov)
        tag = f"shift(x{scale:g})"
    return dataclasses.replace(model, noise_cov=cov, tag=tag)


@dataclass(frozen=True)
class InitialSet:
    """Box of initial states and the distribution used to sample it.

    ``distribution`` is ``"uniform"`` or ``"truncated-gaussian"``; the latter
    uses ``mean`` and a diagonal covariance ``cov`` truncated to the box.
    """

    lower: tuple
    upper: tuple
    distribution: str = "uniform"
    mean: Optional[tuple] = None
    cov: Optional[tuple] = None

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("initial set bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("initial set requires lower <= upper componentwise")
        if self.distribution not in ("uniform", "truncated-gaussian"):
            raise ValueError(f"unknown initial distribution {self.distribution!r}")
        if self.distribution == "truncated-gaussian":
            if self.mean is None or self.cov is None:
                raise ValueError("truncated-gaussian needs mean and (diagonal) cov")
            if len(self.mean) != len(lo) or len(self.cov) != len(lo):
                raise ValueError("mean/cov dimension mismatch")
            if any(c < 0 for c in self.cov):
                raise ValueError("cov entries must be >= 0")

    @property
    def n(self) -> int:
        return len(self.lower)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if self.distribution == "uniform":
            return lo + (hi - lo) * rng.random(self.n)
        mean = np.asarray(self.mean, dtype=float)
        sd = np.sqrt(np.asarray(self.cov, dtype=float))
        out = np.clip(mean, lo, hi)
        ok = (sd > 0) & (hi > lo)
        if np.any(ok):
            a = (lo[ok] - mean[ok]) / sd[ok]
            b = (hi[ok] - mean[ok]) / sd[ok]
            draw = stats.truncnorm.rvs(a, b, loc=mean[ok], scale=sd[ok], random_state=rng)
            out[ok] = np.clip(draw, lo[ok], hi[ok])
        return out

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "distribution": self.distribution,
            "mean": None if self.mean is None else list(self.mean),
            "cov": None if self.cov is None else list(self.cov),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InitialSet":
        return cls(
            lower=tuple(float(v) for v in d["lower"]),
            upper=tuple(float(v) for v in d["upper"]),
            distribution=d.get("distribution", "uniform"),
            mean=None if d.get("mean") is None else tuple(d["mean"]),
            cov=None if d.get("cov") is None else tuple(d["cov"]),
        )


def default_initial_set(name: str) -> InitialSet:
    """Initial-state boxes used with the built-in models."""
    if name == "periodic2d":
        return InitialSet((-0.5, -0.5), (0.5, 0.5))
    if name == "trvdp":
        return InitialSet((-1.2, -1.2), (-1.195, -1.195))
    if name == "quadcopter12d":
        return InitialSet(tuple([-0.2] * 6 + [0.0] * 6), tuple([0.2] * 6 + [0.0] * 6))
    raise ValueError(f"unknown model {name!r}")


# --------------------------------------------------------------------------
# simulation


def simulate_batch(model: SystemModel, s0: np.ndarray, K: int, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Simulate many trajectories at once.

    ``s0`` is ``(L, n)``; ``noise`` is ``(L, K, n)`` already scaled to the
    model covariance (``None`` means noise-free).  Returns ``(L, n(K+1))``.
    """
    s0 = np.atleast_2d(np.asarray(s0, dtype=float))
    if s0.shape[1] != model.n:
        raise ValueError(f"initial state has dimension {s0.shape[1]}, model {model.name} expects {model.n}")
    if int(K) != K or K < 1:
        raise ValueError(f"horizon K must be an integer >= 1, got {K}")
    K = int(K)
    L = s0.shape[0]
    if noise is not None and noise.shape != (L, K, model.n):
        raise ValueError(f"noise must have shape {(L, K, model.n)}, got {noise.shape}")
    out = np.empty((L, K + 1, model.n))
    out[:, 0] = s0
    s = s0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            if noise is not None and model.noise_position == "before":
                s = model.step(s + noise[:, k])
            elif noise is not None and model.noise_position == "field":
                s = model.step(s, noise[:, k])
            else:
                s = model.step(s)
                if noise is not None:
                    s = s + noise[:, k]
            if not np.all(np.isfinite(s)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(s), axis=1))[0])
                raise SimulationError(
                    f"{model.label}: trajectory {bad} became non-finite at step {k + 1}", step=k + 1
                )
            out[:, k + 1] = s
    return out.reshape(L, -1)


def simulate(
    model: SystemModel,
    s0: Sequence[float],
    K: int,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Simulate one trajectory ``[s_0, ..., s_K]`` (flattened, length n(K+1)).

    Noise is drawn from ``rng`` unless an explicit ``(K, n)`` array of
    (already scaled) noise is given; with neither, the run is noise-free.
    """
    s0 = np.asarray(s0, dtype=float)
    if s0.ndim != 1 or s0.shape[0] != model.n:
        raise ValueError(f"s0 must have length {model.n}")
    if int(K) != K or K < 1:
        raise ValueError(f"horizon K must be an integer >= 1, got {K}")
    if noise is None and rng is not None:
        noise = rng.standard_normal((int(K), model.n)) * model.noise_std
    if noise is not None:
        noise = np.asarray(noise, dtype=float)[None]
    return simulate_batch(model, s0[None], K, noise)[0]


# --------------------------------------------------------------------------
# datasets


@dataclass
class TrajectoryDataset:
    """``L`` i.i.d. trajectories split into initial states and flattened tails."""

    n: int
    K: int
    initial_states: np.ndarray
    tails: np.ndarray
    seed: int
    source_model: str
    noise: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.initial_states = np.asarray(self.initial_states, dtype=float)
        self.tails = np.asarray(self.tails, dtype=float)
        L = self.initial_states.shape[0]
        if self.initial_states.shape != (L, self.n):
            raise ValueError("initial_states must be L x n")
        if self.tails.shape != (L, self.n * self.K):
            raise ValueError(f"tails must be L x nK = {L} x {self.n * self.K}, got {self.tails.shape}")

    @property
    def L(self) -> int:
        return self.initial_states.shape[0]

    @property
    def trajectories(self) -> np.ndarray:
        return np.hstack([self.initial_states, self.tails])

    def state(self, i: int, k: int) -> np.ndarray:
        """State ``k`` (0..K) of trajectory ``i``."""
        if k == 0:
            return self.initial_states[i]
        return self.tails[i, (k - 1) * self.n : k * self.n]

    def subsample_steps(self, factor: int) -> "TrajectoryDataset":
        """Keep every ``factor``-th step (steps factor, 2*factor, ..., K)."""
        if factor < 1 or self.K % factor:
            raise ValueError(f"K={self.K} is not a multiple of {factor}")
        steps = self.tails.reshape(self.L, self.K, self.n)[:, factor - 1 :: factor]
        return TrajectoryDataset(
            n=self.n,
            K=self.K // factor,
            initial_states=self.initial_states.copy(),
            tails=steps.reshape(self.L, -1),
            seed=self.seed,
            source_model=self.source_model,
        )

    def equals(self, other: "TrajectoryDataset") -> bool:
        return (
            self.n == other.n
            and self.K == other.K
            and self.seed == other.seed
            and self.source_model == other.source_model
            and np.array_equal(self.initial_states, other.initial_states)
            and np.array_equal(self.tails, other.tails)
        )


def _trajectory_streams(seed: int, L: int) -> list:
    children = np.random.SeedSequence(int(seed)).spawn(L)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def sample_dataset(
    model: SystemModel,
    init: InitialSet,
    K: int,
    L: int,
    seed: int,
    record_noise: bool = False,
) -> TrajectoryDataset:
    """Draw ``L`` i.i.d. trajectories of horizon ``K``, deterministic in ``seed``.

    Trajectory ``i`` uses its own Philox substream: first the initial state,
    then a ``(K, n)`` block of standard normals.
    """
    if L < 1:
        raise ValueError("dataset size L must be >= 1")
    if init.n != model.n:
        raise ValueError(f"initial set has dimension {init.n}, model expects {model.n}")
    if int(K) != K or K < 1:
        raise ValueError(f"horizon K must be an integer >= 1, got {K}")
    K = int(K)
    s0 = np.empty((L, model.n))
    noise = np.empty((L, K, model.n))
    for i, rng in enumerate(_trajectory_streams(seed, L)):
        s0[i] = init.sample(rng)
        noise[i] = rng.standard_normal((K, model.n))
    noise *= model.noise_std
    traj = simulate_batch(model, s0, K, noise)
    return TrajectoryDataset(
        n=model.n,
        K=K,
        initial_states=s0,
        tails=traj[:, model.n :],
        seed=int(seed),
        source_model=model.label,
        noise=noise if record_noise else None,
    )


_HEADER = ["n", "K", "L", "seed", "model"]


def write_dataset_csv(ds: TrajectoryDataset, path) -> None:
    """Write a dataset: header names, header values, then one row per trajectory."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_HEADER)
        w.writerow([ds.n, ds.K, ds.L, ds.seed, ds.source_model])
        for row in ds.trajectories:
            w.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path) -> TrajectoryDataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != _HEADER:
            raise ValueError(f"{path}: bad dataset header {header}")
        n, K, L, seed, model = next(r)
        n, K, L = int(n), int(K), int(L)
        rows = np.array([[float(v) for v in row] for row in r], dtype=float)
    if rows.shape != (L, n * (K + 1)):
        raise ValueError(f"{path}: expected {L} rows of {n * (K + 1)} values, got {rows.shape}")
    return TrajectoryDataset(n=n, K=K, initial_states=rows[:, :n], tails=rows[:, n:], seed=int(seed), source_model=model)
