"""Set propagation through the surrogate and flowpipe bookkeeping.

Each partition of the initial box is pushed through the network as a
zonotope.  Affine layers are exact; an unstable ReLU (``l < 0 < u``) uses the
relaxation ``y = lam*x + mu + mu*e_new`` with ``lam = u/(u-l)`` and
``mu = -lam*l/2``.  Interval bounds are tracked alongside (plain interval
arithmetic) and intersected with the zonotope's hull at every layer, which
both tightens the relaxation and lets post-ReLU hulls be clipped at 0.

A flowpipe is the list of per-partition boxes in ``R^{n(K+1)}``: the
partition box followed by the interval hull of the propagated zonotope.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .surrogate import SurrogateNet

__all__ = [
    "Box",
    "Zonotope",
    "Flowpipe",
    "InsufficientCalibrationError",
    "partition",
    "relu_transform",
    "propagate",
    "interval_hull",
    "surrogate_flowpipe",
    "inflate",
    "contains",
    "project",
    "save_flowpipe",
    "load_flowpipe",
    "write_projection_csv",
]

# relative outward padding applied to computed bounds to absorb rounding
_PAD = 1e-10


class InsufficientCalibrationError(ValueError):
    pass


@dataclass
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValueError("box bounds contain NaN")
        if np.any(self.lower > self.upper):
            raise ValueError("box requires lower <= upper")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, points) -> np.ndarray:
        """Closed-interval membership for one point or rows of points."""
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower) & (p <= self.upper), axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(size, self.dim))

    def to_zonotope(self) -> "Zonotope":
        return Zonotope(self.center, np.diag(self.radius))


@dataclass
class Zonotope:
    """``{center + generators @ e : e in [-1, 1]^p}``; generators are columns."""

    center: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        g = np.asarray(self.generators, dtype=float)
        if g.size == 0:
            g = np.zeros((self.center.size, 0))
        self.generators = g.reshape(self.center.size, -1)
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.generators))):
            raise ValueError("zonotope entries must be finite")

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def order(self) -> int:
        return self.generators.shape[1]

    def radius(self) -> np.ndarray:
        return np.abs(self.generators).sum(axis=1)

    def affine(self, W, b=None) -> "Zonotope":
        W = np.atleast_2d(np.asarray(W, dtype=float))
        c = W @ self.center
        if b is not None:
            c = c + b
        return Zonotope(c, W @ self.generators)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        e = rng.uniform(-1.0, 1.0, size=(size, self.order))
        return self.center + e @ self.generators.T


def interval_hull(z: Zonotope) -> Box:
    r = z.radius()
    return Box(z.center - r, z.center + r)


def partition(init: Box, splits) -> List[Box]:
    """Regular grid of ``init``; ``splits`` is an int or one count per dimension.

    Boxes are ordered with the last dimension varying fastest.
    """
    counts = np.broadcast_to(np.asarray(splits, dtype=int), (init.dim,))
    if np.any(counts < 1):
        raise ValueError("need at least one split per dimension")
    edges = [np.linspace(lo, hi, c + 1) for lo, hi, c in zip(init.lower, init.upper, counts)]
    for e, lo, hi in zip(edges, init.lower, init.upper):
        e[0], e[-1] = lo, hi
    parts = []
    for idx in itertools.product(*(range(c) for c in counts)):
        lo = [edges[d][i] for d, i in enumerate(idx)]
        hi = [edges[d][i + 1] for d, i in enumerate(idx)]
        parts.append(Box(lo, hi))
    return parts


def _pad(lo, hi):
    scale = _PAD * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
    return lo - scale, hi + scale


def _interval_affine(W, b, lo, hi):
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    new_lo = Wp @ lo + Wn @ hi
    new_hi = Wp @ hi + Wn @ lo
    if b is not None:
        new_lo = new_lo + b
        new_hi = new_hi + b
    return _pad(new_lo, new_hi)


def _zono_bounds(z: Zonotope, lo, hi):
    r = z.radius()
    zl, zu = _pad(z.center - r, z.center + r)
    return np.maximum(zl, lo), np.minimum(zu, hi)


def relu_transform(z: Zonotope, lower=None, upper=None):
    """Apply ReLU to a zonotope given sound pre-activation bounds.

    Returns ``(zonotope, post_lower, post_upper)`` where the post bounds are the
    concrete bounds clipped at 0.  Bounds default to the zonotope's hull.
    """
    if lower is None or upper is None:
        h = interval_hull(z)
        lower = h.lower if lower is None else lower
        upper = h.upper if upper is None else upper
    l = np.asarray(lower, dtype=float)
    u = np.asarray(upper, dtype=float)
    if not (np.all(np.isfinite(l)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite pre-activation bounds")
    c = z.center.copy()
    G = z.generators.copy()
    dead = u <= 0
    unstable = (l < 0) & (u > 0)
    c[dead] = 0.0
    G[dead] = 0.0
    idx = np.flatnonzero(unstable)
    if idx.size:
        lam = u[idx] / (u[idx] - l[idx])
        mu = -lam * l[idx] / 2.0
        c[idx] = lam * c[idx] + mu
        G[idx] *= lam[:, None]
        fresh = np.zeros((z.dim, idx.size))
        fresh[idx, np.arange(idx.size)] = mu
        G = np.hstack([G, fresh])
    return Zonotope(c, G), np.maximum(l, 0.0), np.maximum(u, 0.0)


def _reduce_order(z: Zonotope, keep_front: int, cap: int) -> Zonotope:
    """Box-merge the smallest generators beyond ``cap`` (first ``keep_front`` kept)."""
    if z.order <= cap:
        return z
    front = z.generators[:, :keep_front]
    rest = z.generators[:, keep_front:]
    n_keep = max(cap - keep_front - z.dim, 0)
    norms = np.linalg.norm(rest, axis=0)
    order = np.argsort(-norms, kind="stable")
    kept = rest[:, np.sort(order[:n_keep])]
    merged = np.abs(rest[:, order[n_keep:]]).sum(axis=1)
    box = np.diag(merged)[:, merged > 0]
    return Zonotope(z.center, np.hstack([front, kept, box]))


def propagate(net: SurrogateNet, part: Box, order_cap: Optional[int] = None, return_bounds: bool = False):
    """Sound zonotope image of ``part`` under ``net``.

    ``order_cap`` bounds the generator count after each ReLU layer (default
    four times that layer's width, never below the input symbols plus width).
    With ``return_bounds`` the tracked interval bounds of the output are also
    returned; the output hull intersected with them is still sound.
    """
    if part.dim != net.n_in:
        raise ValueError(f"partition dimension {part.dim} does not match net input {net.n_in}")
    if not (np.all(np.isfinite(part.lower)) and np.all(np.isfinite(part.upper))):
        raise ValueError("partition bounds must be finite")
    n = net.n_in
    z = part.to_zonotope()
    lo, hi = part.lower.copy(), part.upper.copy()
    last = net.depth - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = z.affine(W, b)
        lo, hi = _interval_affine(W, b, lo, hi)
        lo, hi = _zono_bounds(z, lo, hi)
        if l < last:
            z, lo, hi = relu_transform(z, lo, hi)
            cap = order_cap if order_cap is not None else 4 * z.dim
            z = _reduce_order(z, n, max(cap, n + z.dim))
    if net.interp_matrix is not None:
        Wi, W0 = net.interp_matrix, net.interp_initial
        G0 = np.zeros((W0.shape[0], z.order))
        G0[:, :n] = W0 @ np.diag(part.radius)
        z = Zonotope(Wi @ z.center + W0 @ part.center, Wi @ z.generators + G0)
        a_lo, a_hi = _interval_affine(Wi, None, lo, hi)
        b_lo, b_hi = _interval_affine(W0, None, part.lower, part.upper)
        lo, hi = _zono_bounds(z, a_lo + b_lo, a_hi + b_hi)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("propagation produced non-finite bounds")
    if return_bounds:
        return z, Box(lo, np.maximum(lo, hi))
    return z


@dataclass
class Flowpipe:
    """Union of per-partition boxes over the flattened trajectory ``[s0, s1..sK]``.

    ``lowers`` / ``uppers`` have shape ``(parts, n(K+1))``.
    """

    n: int
    K: int
    lowers: np.ndarray
    uppers: np.ndarray
    inflated: bool = False
    r_star: Optional[float] = None
    alpha: Optional[np.ndarray] = None
    delta: Optional[float] = None
    tau: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lowers = np.atleast_2d(np.asarray(self.lowers, dtype=float))
        self.uppers = np.atleast_2d(np.asarray(self.uppers, dtype=float))
        d = self.n * (self.K + 1)
        if self.lowers.shape != self.uppers.shape or self.lowers.shape[1] != d:
            raise ValueError(f"parts must have width n(K+1) = {d}")
        if np.any(self.lowers > self.uppers):
            raise ValueError("part with lower > upper")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=float)

    @property
    def num_parts(self) -> int:
        return self.lowers.shape[0]

    @property
    def dim(self) -> int:
        return self.lowers.shape[1]

    @property
    def parts(self) -> List[Box]:
        return [Box(lo, hi) for lo, hi in zip(self.lowers, self.uppers)]


def surrogate_flowpipe(net: SurrogateNet, partitions: Sequence[Box], order_cap: Optional[int] = None) -> Flowpipe:
    """Partition box times the propagated hull, one part per partition, in order."""
    if not partitions:
        raise ValueError("need at least one partition")
    n = net.n_in
    if net.n_out % n:
        raise ValueError("net output width is not a multiple of n")
    lowers, uppers = [], []
    for part in partitions:
        z, bounds = propagate(net, part, order_cap=order_cap, return_bounds=True)
        lowers.append(np.concatenate([part.lower, bounds.lower]))
        uppers.append(np.concatenate([part.upper, bounds.upper]))
    return Flowpipe(n, net.n_out // n, np.array(lowers), np.array(uppers))


def inflate(fp: Flowpipe, r_star: float, alpha, delta: Optional[float] = None, tau: Optional[float] = None) -> Flowpipe:
    """Minkowski sum with the box of half-widths ``r*/alpha_j`` on output dims."""
    if fp.inflated:
        raise ValueError("flowpipe is already inflated")
    if not np.isfinite(r_star):
        raise InsufficientCalibrationError("insufficient calibration data: r* is infinite")
    if r_star < 0:
        raise ValueError("r_star must be nonnegative")
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (fp.dim - fp.n,):
        raise ValueError(f"alpha must have length nK = {fp.dim - fp.n}")
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
        raise ValueError("scaling factors must be finite and positive")
    e = np.concatenate([np.zeros(fp.n), r_star / alpha])
    return Flowpipe(
        fp.n,
        fp.K,
        fp.lowers - e,
        fp.uppers + e,
        inflated=True,
        r_star=float(r_star),
        alpha=alpha.copy(),
        delta=fp.delta if delta is None else delta,
        tau=fp.tau if tau is None else tau,
        meta=dict(fp.meta),
    )


def contains(fp: Flowpipe, traj, chunk: int = 4096):
    """Whether some part contains the flattened trajectory (closed intervals).

    Accepts one trajectory (returns bool) or rows (returns a bool array).
    """
    t = np.asarray(traj, dtype=float)
    single = t.ndim == 1
    T = np.atleast_2d(t)
    if T.shape[1] != fp.dim:
        raise ValueError(f"trajectory width {T.shape[1]} does not match flowpipe width {fp.dim}")
    n = fp.n
    out = np.zeros(T.shape[0], dtype=bool)
    for start in range(0, T.shape[0], chunk):
        block = T[start : start + chunk]
        s0 = block[:, None, :n]
        cand = np.all((s0 >= fp.lowers[None, :, :n]) & (s0 <= fp.uppers[None, :, :n]), axis=2)
        rows, parts = np.nonzero(cand)
        if rows.size == 0:
            continue
        ok = np.all((block[rows] >= fp.lowers[parts]) & (block[rows] <= fp.uppers[parts]), axis=1)
        hit = np.zeros(block.shape[0], dtype=bool)
        np.logical_or.at(hit, rows, ok)
        out[start : start + chunk] = hit
    return bool(out[0]) if single else out


def project(fp: Flowpipe, dim: int, steps=None):
    """Per-step hull over parts for state component ``dim``.

    Returns ``(steps, lower, upper)`` arrays.
    """
    if not 0 <= dim < fp.n:
        raise ValueError(f"component {dim} out of range for n={fp.n}")
    steps = np.arange(fp.K + 1) if steps is None else np.asarray(steps, dtype=int)
    if np.any(steps < 0) or np.any(steps > fp.K):
        raise ValueError(f"steps must lie in [0, {fp.K}]")
    cols = steps * fp.n + dim
    return steps, fp.lowers[:, cols].min(axis=0), fp.uppers[:, cols].max(axis=0)


def save_flowpipe(path, fp: Flowpipe) -> None:
    doc = {
        "n": fp.n,
        "K": fp.K,
        "delta": fp.delta,
        "tau": fp.tau,
        "inflated": fp.inflated,
        "parts": [{"lower": lo.tolist(), "upper": hi.tolist()} for lo, hi in zip(fp.lowers, fp.uppers)],
    }
    if fp.inflated:
        doc["r_star"] = fp.r_star
        doc["alpha"] = fp.alpha.tolist()
    if fp.meta:
        doc["meta"] = fp.meta
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_flowpipe(path) -> Flowpipe:
    with open(path) as fh:
        doc = json.load(fh)
    return Flowpipe(
        doc["n"],
        doc["K"],
        np.array([p["lower"] for p in doc["parts"]], dtype=float),
        np.array([p["upper"] for p in doc["parts"]], dtype=float),
        inflated=doc.get("inflated", False),
        r_star=doc.get("r_star"),
        alpha=doc.get("alpha"),
        delta=doc.get("delta"),
        tau=doc.get("tau"),
        meta=doc.get("meta", {}),
    )


def write_projection_csv(path, fp: Flowpipe, dim: int, steps=None) -> None:
    steps, lo, hi = project(fp, dim, steps)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lower", "upper"])
        for k, a, b in zip(steps, lo, hi):
            w.writerow([int(k), repr(float(a)), repr(float(b))])
