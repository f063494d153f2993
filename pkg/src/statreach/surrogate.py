"""Feedforward ReLU surrogate and its training losses.

The surrogate maps an initial state ``s0`` (width ``n``) to the flattened
trajectory tail (width ``nK``).  Training supports

* ``"quantile"``: ``c * L1 + L2`` where ``L1`` is the pinball loss of the
  scaled trajectory residuals against a trainable level ``q`` and
  ``L2 = q * sum_j 1/alpha_j``;
* ``"mse"``: plain mean squared error, scaling factors set afterwards by
  :func:`normalize_alpha`;
* ``"mse-surface"``: MSE plus the batch mean of the scaled residual times
  ``sum_j 1/alpha_j``.

Gradients are written out by hand (numpy only); the scaling factors are
optimised through ``alpha = exp(a)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

__all__ = [
    "SurrogateNet",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "ALPHA_FLOOR",
    "forward",
    "init_net",
    "loss_quantile_l1",
    "loss_surface_l2",
    "loss_combined",
    "loss_mse",
    "loss_mse_surface",
    "loss_and_grad",
    "upper_bounds",
    "spectral_norm",
    "lipschitz_bound",
    "project_lipschitz",
    "train",
    "normalize_alpha",
    "build_interp_matrix",
    "attach_interpolation",
    "interpolate_alpha",
    "save_model",
    "load_model",
]

ALPHA_FLOOR = 1e-12


class TrainingDivergedError(ArithmeticError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class SurrogateNet:
    """ReLU MLP ``[n, h_1, ..., h_p, nK]`` with a linear output layer.

    ``weights[l]`` has shape ``(out, in)``.  When ``interp_matrix`` is set the
    output becomes ``interp_matrix @ y + interp_initial @ s0``, which maps
    predictions at sampled steps onto every step of a finer horizon.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    interp_matrix: Optional[np.ndarray] = None
    interp_initial: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input width does not match previous layer")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")
        if self.interp_matrix is not None:
            self.interp_matrix = np.asarray(self.interp_matrix, dtype=float)
            if self.interp_matrix.shape[1] != self.weights[-1].shape[0]:
                raise ValueError("interp_matrix columns must equal the trained output width")
            if self.interp_initial is None:
                self.interp_initial = np.zeros((self.interp_matrix.shape[0], self.n_in))
            self.interp_initial = np.asarray(self.interp_initial, dtype=float)
            if self.interp_initial.shape != (self.interp_matrix.shape[0], self.n_in):
                raise ValueError("interp_initial must be (nK_full, n)")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_trained_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_out(self) -> int:
        if self.interp_matrix is not None:
            return self.interp_matrix.shape[0]
        return self.n_trained_out

    @property
    def layer_sizes(self) -> list:
        return [self.n_in] + [w.shape[0] for w in self.weights]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def copy(self) -> "SurrogateNet":
        return SurrogateNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            None if self.interp_matrix is None else self.interp_matrix.copy(),
            None if self.interp_initial is None else self.interp_initial.copy(),
        )


def init_net(layer_sizes: Sequence[int], rng: np.random.Generator) -> SurrogateNet:
    """Fan-in scaled uniform initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output widths")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return SurrogateNet(weights, biases)


def _forward_trained(weights, biases, X):
    """Forward pass through the trained layers, keeping pre-activations."""
    pre = []
    h = X
    last = len(weights) - 1
    acts = [X]
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        if l < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, acts, pre


def forward(net: SurrogateNet, s0) -> np.ndarray:
    """Predicted tail for one state (1-D input) or a batch (rows)."""
    x = np.asarray(s0, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != net.n_in:
        raise ValueError(f"input width {X.shape[1]} does not match net input {net.n_in}")
    y, _, _ = _forward_trained(net.weights, net.biases, X)
    if net.interp_matrix is not None:
        y = y @ net.interp_matrix.T + X @ net.interp_initial.T
    return y[0] if single else y


def _backward(weights, acts, pre, dY):
    """Gradients of a loss w.r.t. weights/biases given ``dL/dY``."""
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    g = dY
    for l in range(len(weights) - 1, -1, -1):
        gw[l] = g.T @ acts[l]
        gb[l] = g.sum(axis=0)
        if l:
            g = (g @ weights[l]) * (pre[l - 1] > 0)
    return gw, gb


# --------------------------------------------------------------------------
# losses (values)


def loss_quantile_l1(residuals, q: float, delta_bar: float) -> float:
    """Pinball loss ``sum_i d*relu(R_i - q) + (1-d)*relu(q - R_i)``."""
    if not 0.0 < delta_bar < 1.0:
        raise ValueError(f"delta_bar must be in (0, 1), got {delta_bar}")
    r = np.asarray(residuals, dtype=float)
    return float(np.sum(delta_bar * np.maximum(r - q, 0.0) + (1.0 - delta_bar) * np.maximum(q - r, 0.0)))


def _check_alpha(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if np.any(~np.isfinite(alpha)) or np.any(alpha <= 0):
        raise ValueError("scaling factors must be finite and positive")
    return alpha


def loss_surface_l2(q: float, alpha) -> float:
    """``q * sum_j 1/alpha_j``."""
    return float(q * np.sum(1.0 / _check_alpha(alpha)))


def loss_combined(l1: float, l2: float, c: float) -> float:
    if not c > 0:
        raise ValueError("c must be positive")
    return c * l1 + l2


def loss_mse(pred, target) -> float:
    return float(np.mean((np.asarray(target) - np.asarray(pred)) ** 2))


def loss_mse_surface(mse: float, components, alpha) -> float:
    """``MSE + mean_i(max_j alpha_j R_i^j) * sum_j 1/alpha_j`` over a batch.

    ``components`` is the ``(batch, nK)`` matrix of absolute errors.
    """
    comps = np.atleast_2d(np.asarray(components, dtype=float))
    if comps.shape[0] == 0:
        raise ValueError("empty batch")
    if np.any(comps < 0):
        raise ValueError("component residuals must be nonnegative")
    alpha = _check_alpha(alpha)
    scaled = np.max(comps * alpha, axis=1)
    return float(mse + scaled.mean() * np.sum(1.0 / alpha))


def upper_bounds(components, alpha) -> np.ndarray:
    """Per-sample bound ``R_i * sum_j 1/alpha_j`` on the summed component errors."""
    comps = np.atleast_2d(np.asarray(components, dtype=float))
    alpha = _check_alpha(alpha)
    return np.max(comps * alpha, axis=1) * np.sum(1.0 / alpha)


# --------------------------------------------------------------------------
# losses (value and gradient)


@dataclass
class Grads:
    weights: list
    biases: list
    alpha: np.ndarray
    q: float


def loss_and_grad(net: SurrogateNet, alpha, q: float, X, Y, mode: str, delta_bar: float = 0.95, c: float = 1e3):
    """Loss value and gradients w.r.t. network parameters, ``alpha`` and ``q``.

    ``mode`` is one of ``"l1"``, ``"l2"``, ``"quantile"`` (``c*L1 + L2``),
    ``"mse"`` and ``"mse-surface"``.  Only the trained layers are
    differentiated (interpolation layers are added after training).
    """
    if net.interp_matrix is not None:
        raise ValueError("loss gradients are defined on nets without an interpolation layer")
    alpha = _check_alpha(alpha)
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    N, out = Y.shape
    P, acts, pre = _forward_trained(net.weights, net.biases, X)
    D = Y - P
    comps = np.abs(D)
    scaled = comps * alpha
    jstar = np.argmax(scaled, axis=1)
    rows = np.arange(N)
    R = scaled[rows, jstar]
    inv_sum = float(np.sum(1.0 / alpha))

    dR = np.zeros(N)
    dP = np.zeros_like(P)
    dalpha = np.zeros_like(alpha)
    dq = 0.0
    value = 0.0

    if mode in ("l1", "quantile"):
        w = 1.0 if mode == "l1" else c
        l1 = loss_quantile_l1(R, q, delta_bar)
        value += w * l1
        slope = delta_bar * (R > q) - (1.0 - delta_bar) * (R < q)
        dR += w * slope
        dq -= w * float(slope.sum())
    if mode in ("l2", "quantile"):
        value += q * inv_sum
        dq += inv_sum
        dalpha -= q / alpha**2
    if mode in ("mse", "mse-surface"):
        value += float(np.mean(D**2))
        dP += -2.0 * D / D.size
    if mode == "mse-surface":
        value += float(R.mean()) * inv_sum
        dR += inv_sum / N
        dalpha -= float(R.mean()) / alpha**2
    if mode not in ("l1", "l2", "quantile", "mse", "mse-surface"):
        raise ValueError(f"unknown loss mode {mode!r}")

    # route dL/dR_i through the arg-max component
    if np.any(dR):
        np.add.at(dalpha, jstar, dR * comps[rows, jstar])
        dP[rows, jstar] += -dR * alpha[jstar] * np.sign(D[rows, jstar])
    gw, gb = _backward(net.weights, acts, pre, dP)
    return value, Grads(gw, gb, dalpha, dq)


# --------------------------------------------------------------------------
# Lipschitz bound


def spectral_norm(W: np.ndarray, iters: int = 100, rtol: float = 1e-8, v0: Optional[np.ndarray] = None) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.atleast_2d(W)
    if v0 is None:
        v = np.random.default_rng(0).standard_normal(W.shape[1])
    else:
        v = np.array(v0, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    v /= nv
    sigma = 0.0
    for _ in range(iters):
        u = W @ v
        new = float(np.linalg.norm(u))
        if new == 0.0:
            return 0.0
        v = W.T @ (u / new)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return new
        v /= nv
        if abs(new - sigma) <= rtol * new:
            sigma = new
            break
        sigma = new
    return max(sigma, float(np.linalg.norm(W @ v)))


def _trained_bound(net: SurrogateNet) -> float:
    return float(np.prod([spectral_norm(w) for w in net.weights]))


def lipschitz_bound(net: SurrogateNet) -> float:
    """Product of per-layer spectral norms (an l2 Lipschitz bound for ReLU nets).

    With an interpolation layer the bound of ``s0 -> (s0, y) -> W y + W0 s0``
    is used, i.e. ``||[W0, W]|| * max(1, prod)``.
    """
    base = _trained_bound(net)
    if net.interp_matrix is None:
        return base
    stacked = np.hstack([net.interp_initial, net.interp_matrix])
    return spectral_norm(stacked) * math.sqrt(1.0 + base**2)


def project_lipschitz(net: SurrogateNet, cap: float, bound: Optional[float] = None) -> float:
    """Rescale the trained layers in place so their norm product is at most ``cap``.

    Each layer is multiplied by ``(cap / bound) ** (1 / depth)``.  Returns the
    bound after projection.
    """
    if bound is None:
        bound = _trained_bound(net)
    if bound <= cap:
        return bound
    factor = (cap / bound) ** (1.0 / net.depth)
    for l in range(net.depth):
        net.weights[l] *= factor
    return bound * factor**net.depth


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    Learning rates are kept per parameter group: ``learning_rate`` drives the
    network under MSE-type losses (including warm-up), ``quantile_learning_rate``
    drives it under the quantile loss, and ``alpha_learning_rate`` /
    ``q_learning_rate`` drive the log-scaling factors and ``q``.
    ``warmup_mse_epochs`` runs that many plain-MSE epochs first; at the switch
    the scaling factors are reset to the normalised residual maxima and ``q``
    to the empirical ``delta_bar``-quantile of the training residuals.

    The quantile loss is unchanged in L2 and linear in L1 under
    ``(alpha, q) -> k (alpha, q)``, so SGD slowly shrinks both, which acts like
    annealing ``c``.

    The network is not updated under the quantile loss by default
    (``quantile_learning_rate = 0``): with ``q`` fixed the pinball term also
    rewards pushing the residuals below ``q`` upwards, and in practice network
    steps raise the quantile they are meant to lower.
    """

    loss_mode: str = "quantile"
    delta_bar: float = 0.95
    c: float = 1e3
    lipschitz_cap: Optional[float] = None
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    quantile_learning_rate: float = 0.0
    alpha_learning_rate: float = 3e-2
    q_learning_rate: float = 3e-2
    warmup_mse_epochs: int = 100

    def __post_init__(self):
        if self.loss_mode not in ("quantile", "mse", "mse-surface"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if not 0.0 < self.delta_bar < 1.0:
            raise ValueError("delta_bar must be in (0, 1)")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.lipschitz_cap is not None and not self.lipschitz_cap > 0:
            raise ValueError("lipschitz_cap must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_mse_epochs < 0:
            raise ValueError("epochs, warmup_mse_epochs >= 0 and batch_size >= 1 required")
        rates = (self.learning_rate, self.quantile_learning_rate, self.alpha_learning_rate, self.q_learning_rate)
        if any(not r >= 0 for r in rates) or not self.learning_rate > 0:
            raise ValueError("learning rates must be nonnegative (learning_rate positive)")
        if self.warmup_mse_epochs > self.epochs:
            raise ValueError("warmup_mse_epochs cannot exceed epochs")
        if self.loss_mode == "quantile" and self.warmup_mse_epochs == 0 and self.quantile_learning_rate == 0:
            raise ValueError("quantile mode without warm-up needs quantile_learning_rate > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    net: SurrogateNet
    alpha: np.ndarray
    q: float
    loss_history: np.ndarray = field(repr=False)
    lipschitz_bound: float = float("nan")
    config: Optional[TrainConfig] = None


class _Optimizer:
    """SGD with momentum or Adam over a flat list of arrays."""

    def __init__(self, kind: str, lrs: list, momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        self.kind = kind
        self.lrs = lrs
        self.momentum = momentum
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list, grads: list) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.kind == "sgd":
                self.m[i] = self.momentum * self.m[i] + g
                p -= self.lrs[i] * self.m[i]
            else:
                self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
                self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
                mhat = self.m[i] / (1 - self.b1**self.t)
                vhat = self.v[i] / (1 - self.b2**self.t)
                p -= self.lrs[i] * mhat / (np.sqrt(vhat) + self.eps)


def _loss_parts(net, alpha, q, X, Y, cfg, mode):
    P = forward(net, X)
    comps = np.abs(Y - P)
    R = np.max(comps * alpha, axis=1)
    if mode == "quantile":
        l1 = loss_quantile_l1(R, q, cfg.delta_bar)
        l2 = loss_surface_l2(q, alpha)
        return l1, l2, loss_combined(l1, l2, cfg.c)
    mse = loss_mse(P, Y)
    if mode == "mse":
        return mse, 0.0, mse
    total = loss_mse_surface(mse, comps, alpha)
    return mse, total - mse, total


def train(dataset, config: TrainConfig, layer_sizes: Sequence[int], seed: Optional[int] = None) -> TrainResult:
    """Fit a surrogate to ``dataset`` (initial states -> tails).

    Deterministic for a given seed (``config.seed`` unless ``seed`` is given).
    """
    seed = config.seed if seed is None else seed
    X = np.asarray(dataset.initial_states, dtype=float)
    Y = np.asarray(dataset.tails, dtype=float)
    L = X.shape[0]
    if L == 0:
        raise ValueError("empty training dataset")
    layer_sizes = list(layer_sizes)
    if layer_sizes[0] != X.shape[1] or layer_sizes[-1] != Y.shape[1]:
        raise ValueError(
            f"architecture {layer_sizes} does not match data widths n={X.shape[1]}, nK={Y.shape[1]}"
        )
    M = min(config.batch_size, L)
    rng = np.random.default_rng(seed)
    net = init_net(layer_sizes, rng)
    log_alpha = np.zeros(Y.shape[1])
    # q = exp(b): the loss is unchanged in L2 and linear in L1 under
    # (alpha, q) -> k (alpha, q), so both drift towards 0 and q gets relative steps
    log_q = np.zeros(1)

    order = rng.permutation(L)
    first = order[:M]
    log_q[0] = _safe_log(np.mean(np.max(np.abs(Y[first] - forward(net, X[first])), axis=1)))

    params = net.weights + net.biases
    n_net = len(params)
    net_lr = config.quantile_learning_rate if config.loss_mode == "quantile" else config.learning_rate
    opt = _Optimizer(
        config.optimizer,
        [net_lr] * n_net + [config.alpha_learning_rate, config.q_learning_rate],
        momentum=config.momentum,
    )
    mse_opt = _Optimizer(config.optimizer, [config.learning_rate] * n_net, momentum=config.momentum)
    trains_alpha = config.loss_mode in ("quantile", "mse-surface")

    history = []
    for epoch in range(config.epochs):
        mode = "mse" if epoch < config.warmup_mse_epochs else config.loss_mode
        if epoch and epoch == config.warmup_mse_epochs and trains_alpha:
            log_alpha[:] = np.log(normalize_alpha(net, dataset))
            R = np.max(np.abs(Y - forward(net, X)) * np.exp(log_alpha), axis=1)
            log_q[0] = _safe_log(np.quantile(R, config.delta_bar, method="inverted_cdf"))
        perm = rng.permutation(L)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, L, M):
            idx = perm[start : start + M]
            alpha = np.exp(log_alpha)
            q = float(np.exp(log_q[0]))
            value, g = loss_and_grad(net, alpha, q, X[idx], Y[idx], mode, config.delta_bar, config.c)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch)
            if mode == "mse":
                mse_opt.step(params, g.weights + g.biases)
            else:
                grads = g.weights + g.biases
                # chain rule through alpha = exp(a)
                ga = g.alpha * alpha if trains_alpha else np.zeros_like(log_alpha)
                gq = np.array([g.q * q]) if mode == "quantile" else np.zeros(1)
                opt.step(params + [log_alpha, log_q], grads + [ga, gq])
            if config.lipschitz_cap is not None:
                _cheap_projection(net, config.lipschitz_cap)
            sums += _loss_parts(net, np.exp(log_alpha), float(np.exp(log_q[0])), X[idx], Y[idx], config, mode)
            batches += 1
        record = sums / batches
        if not np.all(np.isfinite(record)):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch)
        history.append(record)

    if config.lipschitz_cap is not None:
        project_lipschitz(net, config.lipschitz_cap)

    if config.loss_mode == "mse":
        alpha = normalize_alpha(net, dataset)
    else:
        alpha = np.exp(log_alpha)
    if config.loss_mode == "quantile":
        q = float(np.exp(log_q[0]))
    else:
        R = np.max(np.abs(Y - forward(net, X)) * alpha, axis=1)
        q = float(np.quantile(R, config.delta_bar, method="inverted_cdf"))
    return TrainResult(
        net=net,
        alpha=alpha,
        q=q,
        loss_history=np.array(history).reshape(-1, 3),
        lipschitz_bound=lipschitz_bound(net),
        config=config,
    )


def _safe_log(x) -> float:
    return float(np.log(max(float(x), 1e-300)))


def _cheap_projection(net: SurrogateNet, cap: float) -> None:
    # a few warm power iterations per step; the exact projection runs at the end
    state = getattr(net, "_power_vectors", None)
    if state is None:
        rng = np.random.default_rng(1)
        state = [rng.standard_normal(w.shape[1]) for w in net.weights]
    norms = []
    for l, w in enumerate(net.weights):
        v = state[l]
        for _ in range(3):
            u = w @ v
            v = w.T @ u
            nv = np.linalg.norm(v)
            if nv == 0:
                break
            v = v / nv
        state[l] = v
        norms.append(float(np.linalg.norm(w @ v)))
    net._power_vectors = state
    bound = float(np.prod(norms))
    if bound > cap:
        factor = (cap / bound) ** (1.0 / net.depth)
        for w in net.weights:
            w *= factor


# --------------------------------------------------------------------------
# scaling factors and interpolation


def normalize_alpha(net: SurrogateNet, dataset) -> np.ndarray:
    """``alpha_j = 1 / max_i R_i^j`` over the dataset (floored at ``ALPHA_FLOOR``)."""
    X = np.asarray(dataset.initial_states, dtype=float)
    Y = np.asarray(dataset.tails, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    omega = np.max(np.abs(Y - forward(net, X)), axis=0)
    return 1.0 / np.maximum(omega, ALPHA_FLOOR)


def build_interp_matrix(nK_trained: int, nK_full: int, n: int):
    """Linear-interpolation layer from sampled steps to every step.

    Trained step ``t`` sits at full step ``t * r`` with ``r = nK_full /
    nK_trained``.  Returns ``(W, W0)``: ``W`` is ``(nK_full, nK_trained)`` and
    ``W0`` is ``(nK_full, n)``, the weight given to the initial state for full
    steps before the first sampled one.
    """
    if nK_trained % n or nK_full % n:
        raise ValueError("widths must be multiples of n")
    K_tr, K_full = nK_trained // n, nK_full // n
    if K_full % K_tr:
        raise ValueError(f"full horizon {K_full} is not an integer refinement of {K_tr}")
    r = K_full // K_tr
    W = np.zeros((nK_full, nK_trained))
    W0 = np.zeros((nK_full, n))
    eye = np.eye(n)
    for k in range(1, K_full + 1):
        t0, rem = divmod(k, r)
        rows = slice((k - 1) * n, k * n)
        if rem == 0:
            W[rows, (t0 - 1) * n : t0 * n] = eye
            continue
        w1 = rem / r
        W[rows, t0 * n : (t0 + 1) * n] = w1 * eye
        if t0 == 0:
            W0[rows] = (1.0 - w1) * eye
        else:
            W[rows, (t0 - 1) * n : t0 * n] = (1.0 - w1) * eye
    return W, W0


def attach_interpolation(net: SurrogateNet, factor: int) -> SurrogateNet:
    """Copy of ``net`` predicting ``factor`` times as many steps."""
    if net.interp_matrix is not None:
        raise ValueError("net already has an interpolation layer")
    n = net.n_in
    W, W0 = build_interp_matrix(net.n_trained_out, net.n_trained_out * factor, n)
    out = net.copy()
    out.interp_matrix = W
    out.interp_initial = W0
    out.__post_init__()
    return out


def interpolate_alpha(alpha, factor: int, n: int) -> np.ndarray:
    """Interpolate ``omega = 1/alpha`` onto the finer horizon (zero width at step 0)."""
    alpha = _check_alpha(alpha)
    W, _ = build_interp_matrix(alpha.size, alpha.size * factor, n)
    omega = W @ (1.0 / alpha)
    return 1.0 / np.maximum(omega, ALPHA_FLOOR)


# --------------------------------------------------------------------------
# model files


def save_model(path, net: SurrogateNet, alpha, q: float, metadata: Optional[dict] = None) -> None:
    doc = {
        "layer_sizes": net.layer_sizes,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "alpha": np.asarray(alpha, dtype=float).tolist(),
        "q": float(q),
        "metadata": metadata or {},
    }
    if net.interp_matrix is not None:
        doc["interp_matrix"] = net.interp_matrix.tolist()
        doc["interp_initial"] = net.interp_initial.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_model(path):
    """Return ``(net, alpha, q, metadata)``."""
    with open(path) as fh:
        doc = json.load(fh)
    net = SurrogateNet(
        [np.array(w, dtype=float) for w in doc["weights"]],
        [np.array(b, dtype=float) for b in doc["biases"]],
        None if doc.get("interp_matrix") is None else np.array(doc["interp_matrix"], dtype=float),
        None if doc.get("interp_initial") is None else np.array(doc["interp_initial"], dtype=float),
    )
    if net.layer_sizes != list(doc["layer_sizes"]):
        raise ValueError(f"{path}: layer_sizes disagree with weight shapes")
    return net, np.array(doc["alpha"], dtype=float), float(doc["q"]), doc.get("metadata", {})
