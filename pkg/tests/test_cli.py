"""End-to-end CLI runs on a miniature workspace (every subcommand once)."""

import csv

import numpy as np
import pytest

from sphassim.cli import main


CONFIG = """
[dataset]
seed = 3
n_traj = 2
n_steps = 10
ell_max = 2
omega = 0.52
nlon = 16
nlat = 8
dt = 1.0
normalize = true
path = "{data}"

[sinr]
L = 2
D = 2
h = 8
m = 8
seed = 0
epochs = 80
lr_pretrain = 1e-2
lr_latent = 1e-2

[dynamics]
kind = "node"
widths = [24]
substeps = 2
scale = 0.1
epochs = 40
lr_finetune = 3e-3
seed = 0

[filter]
method = "etkf"
sigma_z_b = 0.01
sigma_m = 0.01
inflation = 1.02

[experiment]
dataset_path = "{data}"
sinr_path = "{sinr}"
dynamics_path = "{dyn}"
estimator_path = "{est}"
methods = ["etkf", "enkf"]
sigma_z_b = [0.01]
sigma_m = [0.01, 0.003]
inflation = [1.02]
obs_count = 20
sigma_o = 0.1
sigma_x_b = 0.1
n_members = 12
n_cycles = 4
test_traj = 1
seed = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "out"
    cfg_path = root / "config.toml"
    cfg_path.write_text(CONFIG.format(data=out / "dataset.ltsr",
                                      sinr=out / "sinr.ltsr",
                                      dyn=out / "dynamics.ltsr",
                                      est=out / "estimator.ltsr"))
    args = ["--config", str(cfg_path), "--out", str(out)]
    main(["synth-data", *args])
    main(["pretrain", *args])
    main(["finetune", *args])
    main(["fit-uncertainty", *args, "--kind", "scalar"])
    return root, out, args


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_synth_and_training_outputs(workspace):
    _, out, _ = workspace
    for name in ("dataset.ltsr", "dataset_snapshot.png", "sinr.ltsr",
                 "latents.ltsr", "pretrain_loss.csv", "pretrain_loss.png",
                 "dynamics.ltsr", "finetune_loss.csv", "finetune_loss.png",
                 "estimator.ltsr", "estimator_std.csv"):
        assert (out / name).exists(), name
    rows = read_csv(out / "finetune_loss.csv")
    assert rows[0] == ["epoch", "recon", "pred"]
    assert len(rows) == 41


def test_galewsky(workspace, tmp_path):
    root, out, args = workspace
    main(["galewsky-ic", *args, "--u-m", "65"])
    assert (out / "galewsky.ltsr").exists()
    assert (out / "galewsky.png").exists()
    rows = read_csv(out / "galewsky_profile.csv")
    assert rows[0] == ["lat_deg", "u", "h"]


def test_encode_full_and_masked(workspace):
    _, out, args = workspace
    main(["encode", *args, "--traj", "1", "--time", "2", "--steps", "400"])
    report = read_csv(out / "encode_report.csv")
    assert report[0] == ["observations", "encode_loss", "steps",
                         "full_grid_rmse"]
    assert float(report[1][3]) < 1.0
    main(["encode", *args, "--traj", "1", "--time", "2", "--ratio", "0.3",
          "--steps", "400"])
    assert (out / "encode_reconstruction.png").exists()


def test_predict(workspace):
    _, out, args = workspace
    main(["predict", *args, "--steps", "3"])
    rows = read_csv(out / "pred_rmse.csv")
    assert rows[0] == ["step", "weighted_rmse"]
    assert len(rows) == 5
    assert (out / "pred_rmse.png").exists()


def test_assimilate(workspace):
    _, out, args = workspace
    main(["assimilate", *args])
    rows = read_csv(out / "diagnostics.csv")
    assert rows[0] == ["cycle", "background_rmse", "analysis_rmse", "spread",
                       "config_id"]
    assert len(rows) == 5
    assert (out / "assimilate_rmse.png").exists()


def test_sweep(workspace):
    _, out, args = workspace
    main(["sweep", *args])
    rows = read_csv(out / "results.csv")
    assert rows[0] == ["config_id", "method", "sigma_z_b", "sigma_m",
                       "inflation", "mean_analysis_rmse", "final_rmse",
                       "wall_time_s"]
    assert len(rows) == 1 + 2 * 2      # methods x sigma_m
    assert (out / "sweep_box.png").exists()


def test_metrics(workspace):
    root, out, args = workspace
    main(["galewsky-ic", *args, "--u-m", "61"])
    a = out / "galewsky.ltsr"
    main(["metrics", *args, "--a", str(a), "--b", str(a)])
    rows = read_csv(out / "metrics.csv")
    assert rows[-1][0] == "all"
    assert float(rows[-1][1]) == 0.0
    assert (out / "metrics_diff.png").exists()
