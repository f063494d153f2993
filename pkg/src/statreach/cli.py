"""Command-line entry point (``statreach``).

Exit codes: 0 success, 2 infeasible or invalid configuration, 3 numeric
failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

import numpy as np

from . import conformal, dynamics, pipeline, reach, refine, surrogate
from .conformal import DivergenceSpec, InfeasibleError

EXIT_OK, EXIT_INFEASIBLE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _load_config(args) -> pipeline.ExperimentConfig:
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    seeds = dict(d.get("seeds") or {})
    for name in pipeline.SEED_NAMES:
        v = getattr(args, f"seed_{name}", None)
        if v is not None:
            seeds[name] = v
    if seeds:
        d["seeds"] = seeds
    return pipeline.ExperimentConfig.from_dict(d)


def _out_path(args, default_name):
    out = args.out or "."
    if os.path.isdir(out) or out.endswith(os.sep) or "." not in os.path.basename(out):
        os.makedirs(out, exist_ok=True)
        return os.path.join(out, default_name)
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return out


def cmd_simulate(args, say):
    cfg = _load_config(args)
    model = cfg.real_model() if args.deployment else cfg.sim_model()
    seed = cfg.seeds[args.stage]
    L = args.L if args.L is not None else {"train": cfg.n_train, "calib": cfg.n_calib, "lp": cfg.n_lp or cfg.n_calib, "validate": cfg.n_validate, "shift": cfg.n_shift_sim}[args.stage]
    ds = dynamics.sample_dataset(model, cfg.init_set(), cfg.K, L, seed)
    path = _out_path(args, f"{args.stage}.csv")
    dynamics.write_dataset_csv(ds, path)
    say(f"wrote {ds.L} trajectories of {model.label} (K={ds.K}, seed={seed}) to {path}")


def cmd_train(args, say):
    cfg = _load_config(args)
    ds = dynamics.read_dataset_csv(args.data)
    eps_bar = conformal.effective_epsilon(1.0 - cfg.delta, cfg.divergence_spec, cfg.n_calib)
    tcfg = surrogate.TrainConfig(**cfg.train_config_dict(1.0 - eps_bar))
    factor = cfg.interp_factor
    data = ds if factor == 1 else ds.subsample_steps(factor)
    res = surrogate.train(data, tcfg, cfg.layer_sizes())
    net = res.net if factor == 1 else surrogate.attach_interpolation(res.net, factor)
    alpha = res.alpha if factor == 1 else surrogate.interpolate_alpha(res.alpha, factor, ds.n)
    path = _out_path(args, "model.json")
    surrogate.save_model(
        path,
        net,
        alpha,
        res.q,
        {
            "n": ds.n,
            "K": ds.K,
            "loss_mode": tcfg.loss_mode,
            "seed": tcfg.seed,
            "interp_factor": factor,
            "train_data": {"seed": ds.seed, "source": ds.source_model},
            "train_config": tcfg.to_dict(),
            "lipschitz_bound": res.lipschitz_bound,
        },
    )
    say(f"trained {net.layer_sizes}; q={res.q:.6g}; Lipschitz bound {res.lipschitz_bound:.6g}; wrote {path}")


def _check_not_training_data(meta, ds):
    train = meta.get("train_data") or {}
    if train.get("seed") == ds.seed and train.get("source") == ds.source_model:
        raise ValueError("calibration dataset has the same provenance (seed, model) as the training data")


def cmd_calibrate(args, say):
    cfg = _load_config(args)
    net, alpha, _, meta = surrogate.load_model(args.model)
    ds = dynamics.read_dataset_csv(args.data)
    _check_not_training_data(meta, ds)
    comps = conformal.residual_matrix(net, ds.trajectories)
    scalars = conformal.scalar_residuals(comps, alpha)
    eps = 1.0 - cfg.delta
    robust = conformal.robust_quantile(scalars, eps, cfg.divergence_spec)
    vanilla = conformal.robust_quantile(scalars, eps, DivergenceSpec(cfg.divergence, 0.0))
    path = _out_path(args, "quantile.json")
    doc = {
        "robust": robust.to_dict(),
        "vanilla": vanilla.to_dict(),
        "calib_data": {"seed": ds.seed, "source": ds.source_model},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    if args.residuals:
        conformal.write_residuals_csv(args.residuals, comps, scalars)
    say(f"m={robust.m} eps_bar={robust.epsilon_bar:.6g} r*={robust.r_star:.6g} (vanilla {vanilla.r_star:.6g}); wrote {path}")
    if robust.insufficient:
        raise InfeasibleError("insufficient calibration data: r* is infinite")


def cmd_reach(args, say):
    cfg = _load_config(args)
    net, alpha, _, _ = surrogate.load_model(args.model)
    init = cfg.init_set()
    parts = reach.partition(reach.Box(init.lower, init.upper), cfg.partitions)
    fp = reach.surrogate_flowpipe(net, parts, order_cap=cfg.order_cap)
    fp.delta, fp.tau = cfg.delta, cfg.tau
    if args.quantile:
        with open(args.quantile) as fh:
            q = conformal.RobustQuantileResult.from_dict(json.load(fh)[args.which])
        fp = reach.inflate(fp, q.r_star, alpha, tau=q.divergence.tau)
    path = _out_path(args, "flowpipe.json")
    reach.save_flowpipe(path, fp)
    say(f"{fp.num_parts} partitions, inflated={fp.inflated}; wrote {path}")


def cmd_refine(args, say):
    net, alpha, _, meta = surrogate.load_model(args.model)
    ds = dynamics.read_dataset_csv(args.data)
    factor = int(meta.get("interp_factor", 1))
    if factor > 1:
        # trained steps are copied exactly by the interpolation layer
        rows = np.flatnonzero(np.isclose(net.interp_matrix.max(axis=1), 1.0))
        base = surrogate.SurrogateNet(net.weights, net.biases)
        data = ds.subsample_steps(factor)
        new_alpha = refine.refine_from_data(base, alpha[rows], data.initial_states, data.tails, factor)
    else:
        new_alpha = refine.refine_from_data(net, alpha, ds.initial_states, ds.tails)
    out = args.out or args.model
    if os.path.abspath(out) != os.path.abspath(args.model):
        shutil.copyfile(args.model, out)
    refine.update_model_alpha(out, new_alpha, f"refine(lp_seed={ds.seed}, L={ds.L})")
    say(f"surface sum(1/alpha): {np.sum(1 / alpha):.6g} -> {np.sum(1 / new_alpha):.6g}; wrote {out}")


def cmd_validate(args, say):
    cfg = _load_config(args)
    net, alpha, _, _ = surrogate.load_model(args.model)
    fp = reach.load_flowpipe(args.flowpipe)
    vanilla = None
    if args.vanilla_flowpipe:
        v_fp = reach.load_flowpipe(args.vanilla_flowpipe)
        vanilla = (v_fp, v_fp.r_star)
    report = pipeline.validate(
        fp,
        fp.r_star,
        fp.alpha if fp.alpha is not None else alpha,
        net,
        cfg.sim_model(),
        cfg.real_model(),
        cfg.init_set(),
        cfg.n_validate,
        cfg.seeds["validate"],
        n_shift_sim=cfg.n_shift_sim,
        shift_seed=cfg.seeds["shift"],
        bins=cfg.shift_bins,
        vanilla=vanilla,
    )
    path = _out_path(args, "validation.json")
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    say(f"delta~={report.delta_tilde:.4f} Delta~={report.Delta_tilde:.4f} tau~={report.tau_tilde:.4f}; wrote {path}")


def cmd_export(args, say):
    sfp = reach.load_flowpipe(args.surrogate)
    ifp = reach.load_flowpipe(args.flowpipe)
    comps = args.components if args.components else range(sfp.n)
    chash = ""
    if args.config:
        chash = pipeline.config_hash(_load_config(args))
    samples = None
    if args.samples:
        samples = dynamics.read_dataset_csv(args.samples).trajectories
    out = args.out or "export"
    manifest = pipeline.export(sfp, ifp, comps, out, chash, samples)
    say(f"wrote {len(manifest['files'])} files to {out}")


def cmd_pipeline(args, say):
    cfg = _load_config(args)
    res = pipeline.run_pipeline(cfg, args.out or "run", log=say)
    rep = res.report
    say(
        f"r*={res.robust.r_star:.6g} (vanilla {res.vanilla.r_star:.6g}); "
        f"delta~={rep.delta_tilde:.4f} Delta~={rep.Delta_tilde:.4f} tau~={rep.tau_tilde:.4f}"
    )


def cmd_estimate_shift(args, say):
    net, alpha, _, _ = surrogate.load_model(args.model)
    a = dynamics.read_dataset_csv(args.sim)
    b = dynamics.read_dataset_csv(args.real)
    ra = conformal.scalar_residuals(conformal.residual_matrix(net, a.trajectories), alpha)
    rb = conformal.scalar_residuals(conformal.residual_matrix(net, b.trajectories), alpha)
    tau = conformal.estimate_shift_tv(ra, rb, bins=args.bins)
    print(f"{tau:.6g}")


def cmd_min_calib(args, say):
    size = conformal.min_calibration_size(args.delta, DivergenceSpec(args.divergence, args.tau), strict=args.strict)
    print(size)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--quiet", action="store_true")
    for name in pipeline.SEED_NAMES:
        common.add_argument(f"--seed-{name}", type=int, dest=f"seed_{name}", help=f"override the {name} seed")

    p = argparse.ArgumentParser(prog="statreach", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="sample a trajectory dataset")
    s.add_argument("--stage", choices=pipeline.SEED_NAMES, default="train", help="which named seed / size to use")
    s.add_argument("--L", type=int, help="number of trajectories")
    s.add_argument("--deployment", action="store_true", help="sample the shifted (deployment) system")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train a surrogate")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", parents=[common], help="robust conformal quantile")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--residuals", help="also write the residual CSV here")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("reach", parents=[common], help="surrogate flowpipe, optionally inflated")
    s.add_argument("--model", required=True)
    s.add_argument("--quantile", help="quantile.json from calibrate; inflates the flowpipe")
    s.add_argument("--which", choices=["robust", "vanilla"], default="robust")
    s.set_defaults(func=cmd_reach)

    s = sub.add_parser("refine", parents=[common], help="refine scaling factors on a fresh dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("validate", parents=[common], help="coverage on fresh deployment trajectories")
    s.add_argument("--model", required=True)
    s.add_argument("--flowpipe", required=True)
    s.add_argument("--vanilla-flowpipe")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("export", parents=[common], help="plot-ready CSVs and manifest")
    s.add_argument("--surrogate", required=True, help="surrogate (uninflated) flowpipe")
    s.add_argument("--flowpipe", required=True, help="inflated flowpipe")
    s.add_argument("--components", type=int, nargs="*")
    s.add_argument("--samples", help="dataset CSV to copy as trajectory samples")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("pipeline", parents=[common], help="run every stage")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("estimate-shift", parents=[common], help="TV estimate between two datasets' residuals")
    s.add_argument("--model", required=True)
    s.add_argument("--sim", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--bins", type=int, default=100)
    s.set_defaults(func=cmd_estimate_shift)

    s = sub.add_parser("min-calib", parents=[common], help="minimum calibration size")
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--tau", type=float, default=0.0)
    s.add_argument("--divergence", default="total-variation")
    s.add_argument("--strict", action="store_true", help="also require a finite conformal quantile")
    s.set_defaults(func=cmd_min_calib)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    say = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        args.func(args, say)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except reach.InsufficientCalibrationError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except pipeline.StageError as exc:
        cause = exc.cause
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, OSError):
            return EXIT_IO
        if isinstance(cause, (ArithmeticError, dynamics.SimulationError, FloatingPointError)):
            return EXIT_NUMERIC
        if isinstance(cause, ValueError):
            return EXIT_INFEASIBLE
        return EXIT_NUMERIC
    except (ArithmeticError, dynamics.SimulationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
