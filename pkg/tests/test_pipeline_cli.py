import json
import os

import numpy as np
import pytest

from statreach import cli, conformal, dynamics, pipeline, reach, surrogate
from statreach.pipeline import ExperimentConfig

SMALL = {
    "model": "periodic2d",
    "K": 5,
    "n_train": 1500,
    "n_calib": 500,
    "n_validate": 2000,
    "n_shift_sim": 2000,
    "hidden": [12, 16],
    "partitions": 4,
    "delta": 0.9,
    "train": {"epochs": 20, "warmup_mse_epochs": 15, "batch_size": 128},
}


def small(**kw):
    d = dict(SMALL)
    d.update(kw)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    out = tmp_path_factory.mktemp("a")
    return out, pipeline.run_pipeline(small(n_lp=300), str(out))


def test_pipeline_report_and_tau_zero(run_a):
    out, res = run_a
    assert res.robust.r_star == res.vanilla.r_star
    rep = res.report
    for v in (rep.delta_tilde, rep.Delta_tilde, rep.tau_tilde):
        assert 0.0 <= v <= 1.0
    assert rep.Delta_tilde >= rep.delta_tilde - 0.01
    doc = json.loads((out / "report.json").read_text())
    assert doc["robust"]["r_star"] == doc["vanilla"]["r_star"]
    assert doc["num_partitions"] == 16
    model_meta = json.loads((out / "model.json").read_text())["metadata"]
    assert "alpha_history" in model_meta  # the refine stage ran


def test_pipeline_deterministic(run_a, tmp_path):
    out_a, _ = run_a
    pipeline.run_pipeline(small(n_lp=300), str(tmp_path))
    for name in ("report.json", "model.json", "quantile.json", "flowpipe.json", "flowpipe_vanilla.json", "train.csv", "calib.csv"):
        assert (out_a / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_training_and_calibration_separate(run_a):
    out, _ = run_a
    train = dynamics.read_dataset_csv(out / "train.csv")
    calib = dynamics.read_dataset_csv(out / "calib.csv")
    assert train.seed != calib.seed
    assert not np.any(np.all(np.isclose(train.initial_states[:, None, :], calib.initial_states[None, :50, :]), axis=2))
    with pytest.raises(ValueError):
        small(seeds={"train": 1, "calib": 1, "lp": 3, "validate": 4, "shift": 5})


def test_calibrate_reruns_from_artifacts(run_a):
    out, res = run_a
    net, alpha, _, _ = surrogate.load_model(out / "model.json")
    calib = dynamics.read_dataset_csv(out / "calib.csv")
    scal = conformal.scalar_residuals(conformal.residual_matrix(net, calib.trajectories), alpha)
    assert conformal.robust_quantile(scal, 0.1, conformal.DivergenceSpec()).r_star == res.robust.r_star


def test_export_manifest(run_a):
    out, _ = run_a
    manifest = json.loads((out / "export" / "manifest.json").read_text())
    assert len([f for f in manifest["files"] if f.startswith("component_")]) == 2
    assert manifest["config_sha256"] == pipeline.config_hash(small(n_lp=300))
    for d in range(2):
        rows = np.loadtxt(out / "export" / f"component_{d}.csv", delimiter=",", skiprows=1)
        assert np.all(rows[:, 3] <= rows[:, 1]) and np.all(rows[:, 4] >= rows[:, 2])
    sfp = reach.load_flowpipe(out / "flowpipe_surrogate.json")
    with pytest.raises(ValueError):
        pipeline.export(sfp, reach.load_flowpipe(out / "flowpipe.json"), [5], str(out / "bad"), "")


def test_config_hash_contract():
    a, b = small(), small()
    assert pipeline.config_hash(a) == pipeline.config_hash(b)
    assert pipeline.config_hash(a) != pipeline.config_hash(small(K=6))
    assert ExperimentConfig.from_dict(a.to_dict()).to_dict() == a.to_dict()
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_feasibility_gate(tmp_path):
    cfg = small(model="trvdp", delta=0.77, tau=0.225, n_calib=150, hidden=[8])
    with pytest.raises(conformal.InfeasibleError):
        pipeline.run_pipeline(cfg, str(tmp_path / "x"))
    assert not (tmp_path / "x" / "train.csv").exists()
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    assert cli.main(["pipeline", "--config", str(cfg_path), "--out", str(tmp_path / "y"), "--quiet"]) == 2


def test_validate_all_inside(run_a):
    out, _ = run_a
    cfg = small()
    net, alpha, _, _ = surrogate.load_model(out / "model.json")
    big = reach.Flowpipe(2, 5, np.full((1, 12), -1e6), np.full((1, 12), 1e6), inflated=True, r_star=1e9, alpha=alpha)
    rep = pipeline.validate(big, 1e9, alpha, net, cfg.sim_model(), cfg.real_model(), cfg.init_set(), 500, 9, n_shift_sim=500, shift_seed=10)
    assert rep.Delta_tilde == 1.0 and rep.delta_tilde == 1.0


def test_zero_shift_tau_tilde_small():
    cfg = small()
    model, init = cfg.sim_model(), cfg.init_set()
    a = dynamics.sample_dataset(model, init, 5, 10_000, seed=31)
    b = dynamics.sample_dataset(model, init, 5, 10_000, seed=32)
    net = surrogate.init_net([2, 8, 10], np.random.default_rng(0))
    ra = conformal.scalar_residuals(conformal.residual_matrix(net, a.trajectories), np.ones(10))
    rb = conformal.scalar_residuals(conformal.residual_matrix(net, b.trajectories), np.ones(10))
    assert conformal.estimate_shift_tv(ra, rb, bins=100) < 0.05


# ---------------------------------------------------------------- CLI


def test_cli_stages(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(small().to_dict()))
    c = ["--config", str(cfg_path), "--quiet"]
    d = str(tmp_path)
    assert cli.main(["simulate", *c, "--stage", "train", "--out", f"{d}/train.csv"]) == 0
    assert cli.main(["simulate", *c, "--stage", "calib", "--out", f"{d}/calib.csv"]) == 0
    assert cli.main(["simulate", *c, "--stage", "lp", "--L", "300", "--out", f"{d}/lp.csv"]) == 0
    assert cli.main(["train", *c, "--data", f"{d}/train.csv", "--out", f"{d}/model.json"]) == 0
    # calibrating on the training data is refused
    assert cli.main(["calibrate", *c, "--model", f"{d}/model.json", "--data", f"{d}/train.csv", "--out", f"{d}/q0.json"]) == 2
    assert cli.main(["refine", *c, "--model", f"{d}/model.json", "--data", f"{d}/lp.csv", "--out", f"{d}/model_r.json"]) == 0
    assert cli.main(["calibrate", *c, "--model", f"{d}/model_r.json", "--data", f"{d}/calib.csv", "--out", f"{d}/q.json", "--residuals", f"{d}/res.csv"]) == 0
    assert cli.main(["reach", *c, "--model", f"{d}/model_r.json", "--out", f"{d}/sfp.json"]) == 0
    assert cli.main(["reach", *c, "--model", f"{d}/model_r.json", "--quantile", f"{d}/q.json", "--out", f"{d}/fp.json"]) == 0
    assert cli.main(["validate", *c, "--model", f"{d}/model_r.json", "--flowpipe", f"{d}/fp.json", "--out", f"{d}/val.json"]) == 0
    assert cli.main(["export", *c, "--surrogate", f"{d}/sfp.json", "--flowpipe", f"{d}/fp.json", "--samples", f"{d}/calib.csv", "--out", f"{d}/exp"]) == 0
    assert cli.main(["simulate", *c, "--stage", "shift", "--deployment", "--out", f"{d}/real.csv"]) == 0
    assert cli.main(["estimate-shift", "--model", f"{d}/model_r.json", "--sim", f"{d}/calib.csv", "--real", f"{d}/real.csv"]) == 0

    val = json.loads((tmp_path / "val.json").read_text())
    assert 0.8 <= val["delta_tilde"] <= 1.0
    assert sorted(os.listdir(tmp_path / "exp")) == ["component_0.csv", "component_1.csv", "manifest.json", "samples.csv"]
    fp = reach.load_flowpipe(tmp_path / "fp.json")
    assert fp.inflated and fp.num_parts == 16
    comps, scal = conformal.read_residuals_csv(tmp_path / "res.csv")
    assert comps.shape == (500, 10)


def test_cli_min_calib(capsys):
    assert cli.main(["min-calib", "--delta", "0.77", "--tau", "0.225"]) == 0
    assert capsys.readouterr().out.strip() == "200"
    assert cli.main(["min-calib", "--delta", "0.77", "--tau", "0.225", "--strict"]) == 0
    assert int(capsys.readouterr().out) >= 200
    assert cli.main(["min-calib", "--delta", "0.9", "--tau", "0.225"]) == 2


def test_cli_io_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "missing.csv"), "--quiet"]) == 4


def test_cli_seed_override(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(small().to_dict()))
    for seed in (7, 8):
        assert cli.main(["simulate", "--config", str(cfg_path), "--quiet", "--stage", "train", "--L", "5", "--seed-train", str(seed), "--out", str(tmp_path / f"s{seed}.csv")]) == 0
    assert dynamics.read_dataset_csv(tmp_path / "s7.csv").seed == 7
    assert not np.array_equal(dynamics.read_dataset_csv(tmp_path / "s7.csv").tails, dynamics.read_dataset_csv(tmp_path / "s8.csv").tails)
