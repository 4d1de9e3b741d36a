"""Command-line interface.

Subcommands: synth-data, galewsky-ic, pretrain, finetune, fit-uncertainty,
encode, predict, assimilate, sweep, metrics.  Global flags (--config, --seed,
--out, --workers) are accepted by every subcommand; --config points at a TOML
file with [dataset], [sinr], [dynamics], [filter], [experiment] sections.
Report paths write figures (PNG) next to their delimited (CSV) outputs.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import datasets as dsets
from . import plots
from .dynamics import OdeFuncParams, RezeroParams, init_node_params, init_rezero_params
from .experiment import (ExperimentConfig, experiment_config_from_sections,
                         load_config_file, load_models, random_obs_operator,
                         run_experiment, run_masked_reconstruction,
                         write_diagnostics_csv, write_results_csv)
from .ltsr import load_ltsr, load_params, save_ltsr, save_params
from .metrics import multi_step_pred_rmse, weighted_rmse, weighted_rmse_flat
from .sinr import (AffineDecoder, EncodeOptions, SinrDims, SinrParams,
                   encode_values, init_sinr_params, sinr_decode, sinr_encode)
from .training import LatentTable, LossTrace, TrainConfig, finetune, pretrain
from .uncertainty import fit_mle


def _global_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="TOML config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=str, default="out", help="output directory")
    p.add_argument("--workers", type=int, default=None, help="parallel sweep cells")


def _sections(args) -> dict:
    return load_config_file(args.config) if args.config else {}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeded(section: dict, args, default: int = 0) -> int:
    return args.seed if args.seed is not None else int(section.get("seed", default))


def _load_dataset(args, sections) -> dsets.Dataset:
    path = getattr(args, "data", None) or sections.get("dataset", {}).get("path")
    if not path:
        sys.exit("error: no dataset given (--data or [dataset].path)")
    return dsets.Dataset.load(path)


def cmd_synth_data(args) -> None:
    sec = _sections(args).get("dataset", {})
    out = _out_dir(args)
    data = dsets.gen_synthetic_rotation(
        seed=_seeded(sec, args),
        n_traj=int(sec.get("n_traj", 20)),
        n_steps=int(sec.get("n_steps", 240)),
        ell_max=int(sec.get("ell_max", 6)),
        omega=float(sec.get("omega", 2.0 * math.pi / 96.0)),
        nlon=int(sec.get("nlon", 64)),
        nlat=int(sec.get("nlat", 32)),
        dt=float(sec.get("dt", 1.0)))
    if bool(sec.get("normalize", True)):
        data = data.normalize()
    path = out / "dataset.ltsr"
    data.save(path)
    fig = plots.save_field_maps(data.flat[0, 0], data.values.shape[2],
                                data.values.shape[3], out / "dataset_snapshot.png",
                                data.channel_names, title="trajectory 0, step 0")
    print(f"wrote {path} shape={data.values.shape} and {fig}")


def cmd_galewsky_ic(args) -> None:
    sec = _sections(args).get("dataset", {})
    out = _out_dir(args)
    grid = dsets.make_latlon_grid(int(sec.get("nlon", 128)), int(sec.get("nlat", 64)))
    u_m = float(args.u_m if args.u_m is not None else sec.get("u_m", 70.0))
    snap = dsets.gen_galewsky_ic(u_m, grid)
    path = out / "galewsky.ltsr"
    dsets.save_snapshot(snap, path)
    nlon, nlat = int(sec.get("nlon", 128)), int(sec.get("nlat", 64))
    fig = plots.save_field_maps(snap.values, nlon, nlat, out / "galewsky.png",
                                snap.channel_names, title=f"balanced jet, u_m={u_m:g}")
    # zonal profile: one row per latitude at the first longitude column
    with open(out / "galewsky_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lat_deg", "u", "h"])
        for j in range(nlat):
            w.writerow([math.degrees(grid.lat[j]), snap.values[j, 0], snap.values[j, 1]])
    print(f"wrote {path}, {fig}, and galewsky_profile.csv")


def _train_cfg(sec: dict, args, stage: str) -> TrainConfig:
    return TrainConfig(
        epochs=int(sec.get("epochs", 500)),
        lr_pretrain=float(sec.get("lr_pretrain", 1e-3)),
        lr_finetune=float(sec.get("lr_finetune", 1e-4)),
        lr_latent=float(sec.get("lr_latent", 1e-2)),
        s=int(sec.get("s", 1)),
        seed=_seeded(sec, args),
        checkpoint_every=int(sec.get("checkpoint_every", 0)),
        checkpoint_dir=str(_out_dir(args) / "checkpoints"),
        optimizer=str(sec.get("optimizer", "adam")),
        batch_size=sec.get("batch_size"),
    )


def cmd_pretrain(args) -> None:
    sections = _sections(args)
    sec = sections.get("sinr", {})
    out = _out_dir(args)
    data = _load_dataset(args, sections)
    dims = SinrDims(L=int(sec.get("L", 8)), D=int(sec.get("D", 8)),
                    h=int(sec.get("h", 128 * data.n_channels)),
                    m=int(sec.get("m", 400)), c=data.n_channels)
    params = init_sinr_params(dims, seed=_seeded(sec, args),
                              skip=bool(sec.get("skip", True)))
    table = LatentTable(data.n_traj, data.n_steps, dims.m)
    trace = LossTrace()
    cfg = _train_cfg(sec, args, "pretrain")
    params, table = pretrain(data, params, table, cfg, trace)
    save_params(params.params, out / "sinr.ltsr", meta=params.to_meta())
    save_ltsr(table.z, out / "latents.ltsr")
    trace.write_csv(out / "pretrain_loss.csv")
    fig = plots.save_loss_trace(trace.rows, out / "pretrain_loss.png", "pre-training")
    print(f"wrote sinr.ltsr, latents.ltsr, pretrain_loss.csv, {fig}; "
          f"final recon loss {trace.rows[-1][1]:.3e}")


def _load_sinr(args, out: Path) -> SinrParams:
    path = getattr(args, "sinr", None) or out / "sinr.ltsr"
    pv, meta = load_params(path)
    return SinrParams.from_meta(pv, meta)


def _load_latents(args, out: Path, data, m: int) -> LatentTable:
    path = getattr(args, "latents", None) or out / "latents.ltsr"
    z = load_ltsr(path).tensor
    return LatentTable(data.n_traj, data.n_steps, m, values=z)


def _load_dynamics(path):
    pv, meta = load_params(path)
    if meta.get("kind") == "rezero":
        return RezeroParams.from_meta(pv, meta)
    return OdeFuncParams.from_meta(pv, meta)


def cmd_finetune(args) -> None:
    sections = _sections(args)
    sec = sections.get("dynamics", {})
    out = _out_dir(args)
    data = _load_dataset(args, sections)
    sinr = _load_sinr(args, out)
    table = _load_latents(args, out, data, sinr.dims.m)
    kind = str(sec.get("kind", "node"))
    if kind == "rezero":
        dyn = init_rezero_params(sinr.dims.m, n_blocks=int(sec.get("n_blocks", 5)),
                                 seed=_seeded(sec, args), dt=data.dt)
    else:
        widths = tuple(int(w) for w in sec.get("widths", (512, 512, 512)))
        dyn = init_node_params(sinr.dims.m, widths=widths, seed=_seeded(sec, args),
                               dt=data.dt, substeps=int(sec.get("substeps", 4)),
                               scale=float(sec.get("scale", 1.0)))
    trace = LossTrace()
    cfg = _train_cfg(sec, args, "finetune")
    sinr, table, dyn = finetune(data, sinr, table, dyn, cfg, trace)
    save_params(sinr.params, out / "sinr.ltsr", meta=sinr.to_meta())
    save_ltsr(table.z, out / "latents.ltsr")
    save_params(dyn.params, out / "dynamics.ltsr", meta=dyn.to_meta())
    trace.write_csv(out / "finetune_loss.csv")
    fig = plots.save_loss_trace(trace.rows, out / "finetune_loss.png", "fine-tuning")
    print(f"wrote dynamics.ltsr (+ updated sinr/latents), finetune_loss.csv, {fig}; "
          f"recon {trace.rows[-1][1]:.3e} pred {trace.rows[-1][2]:.3e}")


def cmd_fit_uncertainty(args) -> None:
    sections = _sections(args)
    out = _out_dir(args)
    data = _load_dataset(args, sections)
    dyn = _load_dynamics(getattr(args, "dynamics", None) or out / "dynamics.ltsr")
    z = load_ltsr(getattr(args, "latents", None) or out / "latents.ltsr").tensor
    z_from = z[:, :-1].reshape(-1, z.shape[2])
    z_to = z[:, 1:].reshape(-1, z.shape[2])
    est = fit_mle((z_from, z_to), dyn, kind=args.kind)
    from .autodiff import ParamVector
    save_params(ParamVector.from_segments({"d": est.d}), out / "estimator.ltsr",
                meta=est.to_meta())
    with open(out / "estimator_std.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coordinate", "std"])
        for i, s in enumerate(est.std(z.shape[2])):
            w.writerow([i, s])
    print(f"wrote estimator.ltsr ({args.kind}); mean std "
          f"{float(est.std(z.shape[2]).mean()):.4g}")


def cmd_encode(args) -> None:
    sections = _sections(args)
    out = _out_dir(args)
    data = _load_dataset(args, sections)
    sinr = _load_sinr(args, out)
    snap = data.snapshot(args.traj, args.time)
    grid = data.grid
    c = data.n_channels
    if args.count or args.ratio < 1.0:
        total = len(grid) * c
        count = args.count or max(1, int(round(args.ratio * total)))
        template = random_obs_operator(grid, count, seed=_seeded({}, args),
                                       n_channels=c, noise_std=1.0)
        y = snap.values.reshape(-1)[template.indices]
        res = encode_values(sinr, grid, template.indices, y,
                            opts=EncodeOptions(steps=args.steps, lr=1e-2, tol=1e-12))
        label = f"{count} of {total} values"
    else:
        res = sinr_encode(sinr, snap, opts=EncodeOptions(steps=args.steps, lr=1e-2,
                                                         tol=1e-12))
        label = "full grid"
    decoded = sinr_decode(sinr, res.latent, grid, channel_names=data.channel_names)
    rmse = weighted_rmse(snap, decoded)
    save_ltsr(res.latent.z, out / "encoded_latent.ltsr")
    with open(out / "encode_report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["observations", "encode_loss", "steps", "full_grid_rmse"])
        w.writerow([label, res.loss, res.steps, rmse])
    nlon, nlat = data.values.shape[2], data.values.shape[3]
    fig = plots.save_field_maps(
        np.concatenate([snap.values, decoded.values], axis=1), nlon, nlat,
        out / "encode_reconstruction.png",
        tuple(f"{n} (truth)" for n in data.channel_names)
        + tuple(f"{n} (recon)" for n in data.channel_names),
        title=f"encode from {label}: rmse {rmse:.4f}")
    print(f"encoded from {label}: loss {res.loss:.3e}, full-grid rmse {rmse:.4f}; "
          f"wrote encode_report.csv and {fig}")


def cmd_predict(args) -> None:
    sections = _sections(args)
    out = _out_dir(args)
    data = _load_dataset(args, sections)
    sinr = _load_sinr(args, out)
    table = _load_latents(args, out, data, sinr.dims.m)
    dyn = _load_dynamics(getattr(args, "dynamics", None) or out / "dynamics.ltsr")
    curve = multi_step_pred_rmse(data, sinr, table, dyn, args.steps)
    with open(out / "pred_rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "weighted_rmse"])
        w.writerows(enumerate(curve))
    fig = plots.save_pred_curve(curve, out / "pred_rmse.png")
    print(f"wrote pred_rmse.csv and {fig}; curve: "
          + " ".join(f"{x:.4f}" for x in curve))


def _experiment_cfg(args, sections) -> ExperimentConfig:
    overrides = {"seed": args.seed, "workers": args.workers}
    for name in ("data", "sinr", "dynamics", "estimator"):
        val = getattr(args, name, None)
        if val:
            overrides[{"data": "dataset_path", "sinr": "sinr_path",
                       "dynamics": "dynamics_path",
                       "estimator": "estimator_path"}[name]] = val
    return experiment_config_from_sections(sections, **overrides)


def cmd_assimilate(args) -> None:
    sections = _sections(args)
    out = _out_dir(args)
    cfg = _experiment_cfg(args, sections)
    filt = sections.get("filter", {})
    cfg = ExperimentConfig(**{**cfg.__dict__,
                              "methods": (str(filt.get("method", "etkf")),),
                              "sigma_z_b": (float(filt.get("sigma_z_b", 0.01)),),
                              "sigma_m": (float(filt.get("sigma_m", 0.01)),),
                              "inflation": (float(filt.get("inflation", 1.02)),)})
    rows, diagnostics, failures = run_experiment(cfg, out_dir=None, log=print)
    write_results_csv(rows, out / "results.csv")
    write_diagnostics_csv(diagnostics, out / "diagnostics.csv")
    curves = {rows[0].method: [d[2] for d in diagnostics]}
    fig = plots.save_rmse_curves(curves, out / "assimilate_rmse.png",
                                 hline=cfg.sigma_o)
    print(f"wrote results.csv, diagnostics.csv, {fig}")
    if failures:
        print(f"failures: {failures}")


def cmd_sweep(args) -> None:
    sections = _sections(args)
    out = _out_dir(args)
    cfg = _experiment_cfg(args, sections)
    if cfg.grid_mode == "random-mask":
        dataset, sinr, _, _ = load_models(cfg)
        rows = run_masked_reconstruction(cfg, dataset, sinr)
        with open(out / "masked_recon.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "n_obs", "full_grid_rmse"])
            w.writerows(rows)
        print(f"wrote masked_recon.csv ({len(rows)} rows)")
        return
    rows, diagnostics, failures = run_experiment(cfg, out_dir=out, log=print)
    fig = plots.save_sweep_boxplot(rows, out / "sweep_box.png",
                                   title=f"{cfg.grid_mode} sweep")
    print(f"wrote results.csv ({len(rows)} rows), diagnostics.csv, {fig}; "
          f"{len(failures)} failures")


def cmd_metrics(args) -> None:
    out = _out_dir(args)
    a = dsets.load_snapshot(args.a)
    b = dsets.load_snapshot(args.b)
    total = weighted_rmse(a, b)
    per_channel = []
    # per-channel: restrict both snapshots to one column at a time
    from .sinr import FieldSnapshot
    for i, name in enumerate(a.channel_names):
        pa = FieldSnapshot(a.sset, a.values[:, i:i + 1], (name,))
        pb = FieldSnapshot(b.sset, b.values[:, i:i + 1], (name,))
        per_channel.append((name, weighted_rmse(pa, pb)))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "weighted_rmse"])
        w.writerows(per_channel)
        w.writerow(["all", total])
    f = load_ltsr(args.a)
    nlon, nlat = int(f.meta["nlon"]), int(f.meta["nlat"])
    fig = plots.save_field_maps(a.values - b.values, nlon, nlat,
                                out / "metrics_diff.png",
                                tuple(f"{n} (a-b)" for n in a.channel_names),
                                title=f"difference, weighted rmse {total:.4g}")
    print(f"weighted rmse {total:.6g}; wrote metrics.csv and {fig}")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(prog="sphassim",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        _global_flags(p)
        for flag, kw in extra.items():
            p.add_argument(flag, **kw)
        p.set_defaults(fn=fn)
        return p

    add("synth-data", cmd_synth_data)
    add("galewsky-ic", cmd_galewsky_ic, **{"--u-m": dict(type=float, default=None,
                                                         dest="u_m")})
    add("pretrain", cmd_pretrain, **{"--data": dict(type=str, default=None)})
    add("finetune", cmd_finetune, **{"--data": dict(type=str, default=None),
                                     "--sinr": dict(type=str, default=None),
                                     "--latents": dict(type=str, default=None)})
    add("fit-uncertainty", cmd_fit_uncertainty,
        **{"--data": dict(type=str, default=None),
           "--latents": dict(type=str, default=None),
           "--dynamics": dict(type=str, default=None),
           "--kind": dict(type=str, default="scalar",
                          choices=("scalar", "diagonal"))})
    add("encode", cmd_encode, **{"--data": dict(type=str, default=None),
                                 "--sinr": dict(type=str, default=None),
                                 "--traj": dict(type=int, default=0),
                                 "--time": dict(type=int, default=0),
                                 "--ratio": dict(type=float, default=1.0),
                                 "--count": dict(type=int, default=None),
                                 "--steps": dict(type=int, default=500)})
    add("predict", cmd_predict, **{"--data": dict(type=str, default=None),
                                   "--sinr": dict(type=str, default=None),
                                   "--latents": dict(type=str, default=None),
                                   "--dynamics": dict(type=str, default=None),
                                   "--steps": dict(type=int, default=10)})
    add("assimilate", cmd_assimilate, **{"--data": dict(type=str, default=None),
                                         "--sinr": dict(type=str, default=None),
                                         "--dynamics": dict(type=str, default=None),
                                         "--estimator": dict(type=str, default=None)})
    add("sweep", cmd_sweep, **{"--data": dict(type=str, default=None),
                               "--sinr": dict(type=str, default=None),
                               "--dynamics": dict(type=str, default=None),
                               "--estimator": dict(type=str, default=None)})
    add("metrics", cmd_metrics, **{"--a": dict(type=str, required=True),
                                   "--b": dict(type=str, required=True)})

    args = parser.parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
