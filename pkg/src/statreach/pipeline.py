"""End-to-end runs: sample, train, refine, calibrate, reach, inflate, validate.

Everything a run produces goes into one output directory.  JSON artifacts are
deterministic given the config (runtimes are kept in ``timings.txt`` so the
JSON files stay byte-identical across repeated runs).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conformal, dynamics, reach, refine, surrogate
from .conformal import DivergenceSpec, InfeasibleError, RobustQuantileResult

__all__ = [
    "ExperimentConfig",
    "ValidationReport",
    "StageError",
    "PipelineResult",
    "DEFAULT_HIDDEN",
    "check_feasible",
    "run_pipeline",
    "validate",
    "export",
    "config_hash",
]

# hidden widths used when the config gives none (grow from n towards nK)
DEFAULT_HIDDEN = {"periodic2d": [20, 40], "trvdp": [30, 50], "quadcopter12d": [60, 120]}

SEED_NAMES = ("train", "calib", "lp", "validate", "shift")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    """One experiment.  ``shift`` describes the deployment system relative to the
    simulator; ``train`` holds :class:`~statreach.surrogate.TrainConfig` fields
    (``delta_bar`` defaults to ``1 - eps_bar``)."""

    model: str = "periodic2d"
    model_overrides: dict = field(default_factory=dict)
    shift: Optional[dict] = None
    initial_set: Optional[dict] = None
    K: int = 20
    n_train: int = 10_000
    n_calib: int = 2000
    n_lp: int = 0
    n_validate: int = 10_000
    n_shift_sim: int = 10_000
    hidden: Optional[list] = None
    interp_factor: int = 1
    train: dict = field(default_factory=dict)
    partitions: object = 20
    order_cap: Optional[int] = None
    delta: float = 0.95
    tau: float = 0.0
    divergence: str = "total-variation"
    shift_bins: int = 100
    seeds: dict = field(default_factory=lambda: {"train": 1, "calib": 2, "lp": 3, "validate": 4, "shift": 5})

    def __post_init__(self):
        if self.model not in dynamics.MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        for name in ("K", "n_train", "n_calib", "n_validate", "n_shift_sim", "interp_factor"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_lp < 0:
            raise ValueError("n_lp must be >= 0")
        if self.K % self.interp_factor:
            raise ValueError("K must be a multiple of interp_factor")
        seeds = {"train": 1, "calib": 2, "lp": 3, "validate": 4, "shift": 5}
        seeds.update(self.seeds or {})
        unknown = set(seeds) - set(SEED_NAMES)
        if unknown:
            raise ValueError(f"unknown seed names {sorted(unknown)}")
        if seeds["calib"] == seeds["train"]:
            raise ValueError("calibration data must not reuse the training seed")
        self.seeds = {k: int(seeds[k]) for k in SEED_NAMES}
        DivergenceSpec(self.divergence, self.tau)
        surrogate.TrainConfig(**self.train_config_dict(0.95))

    def train_config_dict(self, delta_bar: float) -> dict:
        d = {"delta_bar": delta_bar}
        d.update(self.train)
        d["seed"] = self.seeds["train"] if "seed" not in self.train else self.train["seed"]
        return d

    @property
    def divergence_spec(self) -> DivergenceSpec:
        return DivergenceSpec(self.divergence, self.tau)

    def sim_model(self) -> dynamics.SystemModel:
        return dynamics.get_model(self.model, **self.model_overrides)

    def real_model(self) -> dynamics.SystemModel:
        sim = self.sim_model()
        if not self.shift:
            return sim
        return dynamics.apply_shift(sim, dynamics.ShiftSpec.from_dict(self.shift))

    def init_set(self) -> dynamics.InitialSet:
        if self.initial_set:
            return dynamics.InitialSet.from_dict(self.initial_set)
        return dynamics.default_initial_set(self.model)

    def layer_sizes(self) -> list:
        n = dynamics.MODELS[self.model]["n"]
        hidden = self.hidden if self.hidden is not None else DEFAULT_HIDDEN[self.model]
        return [n] + list(hidden) + [n * self.K // self.interp_factor]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.canonical_json().encode()).hexdigest()


@dataclass
class ValidationReport:
    delta_tilde: float
    Delta_tilde: float
    tau_tilde: float
    n_validate: int
    n_shift_sim: int
    seed: int
    vanilla_delta_tilde: Optional[float] = None
    vanilla_Delta_tilde: Optional[float] = None

    def __post_init__(self):
        for name in ("delta_tilde", "Delta_tilde", "tau_tilde", "vanilla_delta_tilde", "vanilla_Delta_tilde"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def check_feasible(config: ExperimentConfig) -> int:
    """Raise InfeasibleError unless the calibration set can certify delta under tau."""
    need = conformal.min_calibration_size(config.delta, config.divergence_spec, strict=True)
    if need > config.n_calib:
        raise InfeasibleError(
            f"delta={config.delta}, tau={config.tau} needs at least {need} calibration trajectories, "
            f"config has {config.n_calib}",
            min_m=need,
        )
    return need


def _scalar(net, alpha, ds) -> np.ndarray:
    comps = conformal.residual_matrix(net, ds.trajectories)
    return conformal.scalar_residuals(comps, alpha)


def validate(
    flowpipe: reach.Flowpipe,
    r_star: float,
    alpha,
    net: surrogate.SurrogateNet,
    sim_model: dynamics.SystemModel,
    real_model: dynamics.SystemModel,
    init: dynamics.InitialSet,
    n_validate: int,
    seed: int,
    n_shift_sim: Optional[int] = None,
    shift_seed: Optional[int] = None,
    bins: int = 100,
    vanilla: Optional[tuple] = None,
) -> ValidationReport:
    """Coverage of fresh deployment trajectories.

    ``Delta_tilde`` is the fraction inside ``flowpipe``; ``delta_tilde`` the
    fraction of residuals at or below ``r_star`` (same trajectories);
    ``tau_tilde`` the histogram TV distance between deployment and fresh
    simulator residuals.  ``vanilla`` optionally gives ``(flowpipe, r_star)``
    of the unadjusted quantile for comparison.
    """
    if not flowpipe.inflated:
        raise ValueError("validation needs an inflated flowpipe")
    if real_model.n != flowpipe.n or net.n_out != flowpipe.dim - flowpipe.n:
        raise ValueError("model / flowpipe dimension mismatch")
    if n_validate < 1:
        raise ValueError("n_validate must be >= 1")
    n_shift_sim = n_validate if n_shift_sim is None else n_shift_sim
    shift_seed = seed + 1 if shift_seed is None else shift_seed
    real = dynamics.sample_dataset(real_model, init, flowpipe.K, n_validate, seed)
    res_real = _scalar(net, alpha, real)
    sim = dynamics.sample_dataset(sim_model, init, flowpipe.K, n_shift_sim, shift_seed)
    res_sim = _scalar(net, alpha, sim)
    traj = real.trajectories
    report = ValidationReport(
        delta_tilde=conformal.coverage_delta_tilde(res_real, r_star),
        Delta_tilde=float(np.mean(reach.contains(flowpipe, traj))),
        tau_tilde=conformal.estimate_shift_tv(res_sim, res_real, bins=bins),
        n_validate=n_validate,
        n_shift_sim=n_shift_sim,
        seed=seed,
    )
    if vanilla is not None:
        v_fp, v_r = vanilla
        report.vanilla_delta_tilde = conformal.coverage_delta_tilde(res_real, v_r)
        report.vanilla_Delta_tilde = float(np.mean(reach.contains(v_fp, traj)))
    return report


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def export(
    surrogate_fp: reach.Flowpipe,
    inflated_fp: reach.Flowpipe,
    components,
    out_dir,
    config_sha256: str = "",
    samples: Optional[np.ndarray] = None,
) -> dict:
    """Plot-ready CSVs, one per state component, plus ``manifest.json``.

    Each CSV has columns ``step, surrogate_lower, surrogate_upper,
    inflated_lower, inflated_upper``.  ``samples`` (rows of flattened
    trajectories) is written to ``samples.csv`` when given.
    """
    if surrogate_fp.n != inflated_fp.n or surrogate_fp.K != inflated_fp.K:
        raise ValueError("surrogate and inflated flowpipes disagree in shape")
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for dim in components:
        dim = int(dim)
        if not 0 <= dim < surrogate_fp.n:
            raise ValueError(f"unknown component index {dim} (n={surrogate_fp.n})")
        steps, s_lo, s_hi = reach.project(surrogate_fp, dim)
        _, i_lo, i_hi = reach.project(inflated_fp, dim)
        name = f"component_{dim}.csv"
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "surrogate_lower", "surrogate_upper", "inflated_lower", "inflated_upper"])
            for row in zip(steps, s_lo, s_hi, i_lo, i_hi):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        files[name] = _sha256_file(os.path.join(out_dir, name))
    if samples is not None:
        samples = np.atleast_2d(samples)
        with open(os.path.join(out_dir, "samples.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"k{k}_s{i}" for k in range(surrogate_fp.K + 1) for i in range(surrogate_fp.n)])
            for row in samples:
                w.writerow([repr(float(v)) for v in row])
        files["samples.csv"] = _sha256_file(os.path.join(out_dir, "samples.csv"))
    manifest = {"config_sha256": config_sha256, "files": files}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


@dataclass
class PipelineResult:
    paths: dict
    robust: RobustQuantileResult
    vanilla: RobustQuantileResult
    report: ValidationReport
    train_result: surrogate.TrainResult = field(repr=False)
    surrogate_flowpipe: reach.Flowpipe = field(repr=False)
    flowpipe: reach.Flowpipe = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    timings: dict = field(default_factory=dict)


def _dump(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def run_pipeline(config: ExperimentConfig, out_dir, log=None) -> PipelineResult:
    """Run every stage; errors are re-raised as :class:`StageError`.

    Infeasible ``(delta, tau, n_calib)`` raises InfeasibleError before any
    data is sampled.
    """
    say = log or (lambda msg: None)
    check_feasible(config)
    os.makedirs(out_dir, exist_ok=True)
    paths = {"config": os.path.join(out_dir, "config.json")}
    with open(paths["config"], "w") as fh:
        fh.write(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    chash = config_hash(config)
    timings = {}
    state = {}

    def stage(name):
        def wrap(fn):
            t0 = time.perf_counter()
            say(f"[{name}]")
            try:
                fn()
            except (InfeasibleError, StageError):
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
            timings[name] = time.perf_counter() - t0
            return fn

        return wrap

    sim = config.sim_model()
    init = config.init_set()
    seeds = config.seeds
    eps = 1.0 - config.delta
    div = config.divergence_spec
    factor = config.interp_factor

    @stage("simulate")
    def _():
        state["train"] = dynamics.sample_dataset(sim, init, config.K, config.n_train, seeds["train"])
        state["calib"] = dynamics.sample_dataset(sim, init, config.K, config.n_calib, seeds["calib"])
        paths["train_data"] = os.path.join(out_dir, "train.csv")
        paths["calib_data"] = os.path.join(out_dir, "calib.csv")
        dynamics.write_dataset_csv(state["train"], paths["train_data"])
        dynamics.write_dataset_csv(state["calib"], paths["calib_data"])

    @stage("train")
    def _():
        eps_bar = conformal.effective_epsilon(eps, div, config.n_calib)
        tcfg = surrogate.TrainConfig(**config.train_config_dict(1.0 - eps_bar))
        data = state["train"] if factor == 1 else state["train"].subsample_steps(factor)
        res = surrogate.train(data, tcfg, config.layer_sizes())
        state["result"] = res
        net = res.net if factor == 1 else surrogate.attach_interpolation(res.net, factor)
        alpha = res.alpha if factor == 1 else surrogate.interpolate_alpha(res.alpha, factor, sim.n)
        state["net"], state["alpha"] = net, alpha
        paths["model"] = os.path.join(out_dir, "model.json")
        surrogate.save_model(
            paths["model"],
            net,
            alpha,
            res.q,
            {
                "n": sim.n,
                "K": config.K,
                "loss_mode": tcfg.loss_mode,
                "seed": tcfg.seed,
                "interp_factor": factor,
                "train_data": {"seed": seeds["train"], "source": state["train"].source_model},
                "train_config": tcfg.to_dict(),
                "lipschitz_bound": res.lipschitz_bound,
            },
        )

    if config.n_lp > 0:

        @stage("refine")
        def _():
            lp = dynamics.sample_dataset(sim, init, config.K, config.n_lp, seeds["lp"])
            base = state["result"]
            data = lp if factor == 1 else lp.subsample_steps(factor)
            state["alpha"] = refine.refine_from_data(base.net, base.alpha, data.initial_states, data.tails, factor)
            refine.update_model_alpha(paths["model"], state["alpha"], f"refine(lp_seed={seeds['lp']}, L={config.n_lp})")

    @stage("calibrate")
    def _():
        comps = conformal.residual_matrix(state["net"], state["calib"].trajectories)
        scalars = conformal.scalar_residuals(comps, state["alpha"])
        state["robust"] = conformal.robust_quantile(scalars, eps, div)
        state["vanilla"] = conformal.robust_quantile(scalars, eps, DivergenceSpec(config.divergence, 0.0))
        if state["robust"].insufficient:
            raise InfeasibleError("insufficient calibration data: r* is infinite", min_m=config.n_calib + 1)
        paths["calib_residuals"] = os.path.join(out_dir, "calib_residuals.csv")
        conformal.write_residuals_csv(paths["calib_residuals"], comps, scalars)
        paths["quantile"] = os.path.join(out_dir, "quantile.json")
        _dump(
            paths["quantile"],
            {
                "robust": state["robust"].to_dict(),
                "vanilla": state["vanilla"].to_dict(),
                "calib_data": {"seed": seeds["calib"], "source": state["calib"].source_model},
            },
        )

    @stage("reach")
    def _():
        box = reach.Box(init.lower, init.upper)
        parts = reach.partition(box, config.partitions)
        fp = reach.surrogate_flowpipe(state["net"], parts, order_cap=config.order_cap)
        fp.delta, fp.tau = config.delta, config.tau
        state["surrogate_fp"] = fp
        state["fp"] = reach.inflate(fp, state["robust"].r_star, state["alpha"])
        state["fp_vanilla"] = reach.inflate(fp, state["vanilla"].r_star, state["alpha"], tau=0.0)
        for key, name in (("surrogate_fp", "flowpipe_surrogate"), ("fp", "flowpipe"), ("fp_vanilla", "flowpipe_vanilla")):
            paths[name] = os.path.join(out_dir, name + ".json")
            reach.save_flowpipe(paths[name], state[key])

    @stage("validate")
    def _():
        state["report"] = validate(
            state["fp"],
            state["robust"].r_star,
            state["alpha"],
            state["net"],
            sim,
            config.real_model(),
            init,
            config.n_validate,
            seeds["validate"],
            n_shift_sim=config.n_shift_sim,
            shift_seed=seeds["shift"],
            bins=config.shift_bins,
            vanilla=(state["fp_vanilla"], state["vanilla"].r_star),
        )

    @stage("export")
    def _():
        paths["export"] = os.path.join(out_dir, "export")
        export(state["surrogate_fp"], state["fp"], range(sim.n), paths["export"], chash)

    fp = state["fp"]
    widths = (fp.uppers - fp.lowers)[:, sim.n :]
    report_doc = {
        "config_sha256": chash,
        "model": sim.label,
        "deployment_model": config.real_model().label,
        "n": sim.n,
        "K": config.K,
        "num_partitions": fp.num_parts,
        "robust": state["robust"].to_dict(),
        "vanilla": state["vanilla"].to_dict(),
        "validation": state["report"].to_dict(),
        "surrogate_q": state["result"].q,
        "inflation_surface": float(state["robust"].r_star * np.sum(1.0 / state["alpha"])),
        "mean_flowpipe_width": float(widths.mean()),
        "lipschitz_bound": state["result"].lipschitz_bound,
    }
    paths["report"] = os.path.join(out_dir, "report.json")
    _dump(paths["report"], report_doc)
    paths["timings"] = os.path.join(out_dir, "timings.txt")
    with open(paths["timings"], "w") as fh:
        for name, secs in timings.items():
            fh.write(f"{name}\t{secs:.3f}\n")
    return PipelineResult(
        paths=paths,
        robust=state["robust"],
        vanilla=state["vanilla"],
        report=state["report"],
        train_result=state["result"],
        surrogate_flowpipe=state["surrogate_fp"],
        flowpipe=state["fp"],
        alpha=state["alpha"],
        timings=timings,
    )
