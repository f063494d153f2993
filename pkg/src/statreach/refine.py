"""Post-training refinement of the scaling factors.

Given component residuals ``R_i^j`` and scalar residuals ``R_i`` (computed
under the current alpha on a fresh dataset), the widths ``omega' = 1/alpha'``
minimising ``sum_j omega'_j`` subject to ``R_i * omega'_j >= R_i^j`` are the
column maxima of ``R_i^j / R_i``.  Every scalar residual recomputed with
``alpha'`` is then no larger than before.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .surrogate import ALPHA_FLOOR, SurrogateNet, forward, interpolate_alpha

__all__ = [
    "RefinementInput",
    "refine_scaling",
    "refined_alpha",
    "refine_from_data",
    "update_model_alpha",
]


@dataclass
class RefinementInput:
    components: np.ndarray
    scalars: np.ndarray

    def __post_init__(self):
        self.components = np.atleast_2d(np.asarray(self.components, dtype=float))
        self.scalars = np.atleast_1d(np.asarray(self.scalars, dtype=float))
        if self.components.shape[0] != self.scalars.shape[0]:
            raise ValueError("one scalar residual per component row required")
        if np.any(self.components < 0) or np.any(self.scalars < 0):
            raise ValueError("residuals must be nonnegative")

    @classmethod
    def from_alpha(cls, components, alpha) -> "RefinementInput":
        comps = np.atleast_2d(np.asarray(components, dtype=float))
        return cls(comps, np.max(comps * np.asarray(alpha, dtype=float), axis=1))


def refine_scaling(inp: RefinementInput) -> np.ndarray:
    """``omega'_j = max_i R_i^j / R_i`` over rows with ``R_i > 0``."""
    keep = inp.scalars > 0
    if inp.components.shape[0] == 0 or inp.components.size == 0:
        raise ValueError("refinement needs at least one residual row")
    if not np.any(keep):
        # every prediction exact: no constraint binds
        return np.zeros(inp.components.shape[1])
    return np.max(inp.components[keep] / inp.scalars[keep, None], axis=0)


def refined_alpha(omega) -> np.ndarray:
    return 1.0 / np.maximum(np.asarray(omega, dtype=float), ALPHA_FLOOR)


def refine_from_data(net: SurrogateNet, alpha, initial_states, tails, interp_factor: int = 1) -> np.ndarray:
    """Refined alpha from a fresh dataset.

    With ``interp_factor > 1`` the residuals are taken on the trained steps
    (``tails`` must be sampled on them, ``net`` without its interpolation
    layer) and the refined widths are interpolated to the full horizon.
    """
    alpha = np.asarray(alpha, dtype=float)
    comps = np.abs(np.asarray(tails, dtype=float) - forward(net, initial_states))
    omega = refine_scaling(RefinementInput.from_alpha(comps, alpha))
    a = refined_alpha(omega)
    if interp_factor > 1:
        a = interpolate_alpha(a, interp_factor, net.n_in)
    return a


def update_model_alpha(path, alpha, note: str) -> None:
    """Replace the alpha field of a model file, keeping the old one in metadata."""
    with open(path) as fh:
        doc = json.load(fh)
    meta = doc.setdefault("metadata", {})
    meta.setdefault("alpha_history", []).append({"alpha": doc["alpha"], "replaced_by": note})
    doc["alpha"] = np.asarray(alpha, dtype=float).tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
