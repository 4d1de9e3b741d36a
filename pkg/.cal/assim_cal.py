import numpy as np, math, time, json
from sphassim import datasets as ds, sinr as si, experiment as ex, filters as fl
from sphassim.dynamics import OdeFuncParams
from sphassim.ltsr import load_params, load_ltsr
from sphassim.metrics import weighted_rmse_flat, free_run_rmse
from sphassim.uncertainty import fit_mle, latent_background_cov
from sphassim.training import LatentTable

t0 = time.perf_counter()
data = ds.Dataset.load("/root/pkg/.cal/data5.ltsr")
pv, meta = load_params("/root/pkg/.cal/sinr.ltsr"); params = si.SinrParams.from_meta(pv, meta)
dv, dmeta = load_params("/root/pkg/.cal/dyn.ltsr"); node = OdeFuncParams.from_meta(dv, dmeta)
zt = load_ltsr("/root/pkg/.cal/latents.ltsr").tensor

base = dict(methods=("etkf",), sigma_z_b=(0.01,),
            sigma_m=ex.TABLE_SIGMA_M, inflation=(1.02,),
            obs_count=128, sigma_o=0.1, sigma_x_b=0.1, n_members=64,
            n_cycles=40, test_traj=4, seed=21)
cfg = ex.ExperimentConfig(**base)
rows, diags, fails = ex.run_experiment(cfg, dataset=data, sinr=params, dyn=node)
print("sweep fails:", fails)
for r in rows:
    print(f"{r.config_id} sm={r.sigma_m:g} mean={r.mean_analysis_rmse:.4f} final={r.final_rmse:.4f}")
best = min(rows, key=lambda r: r.mean_analysis_rmse)
print("BEST:", best.config_id, best.sigma_m, best.mean_analysis_rmse)

# per-cycle analysis curve of best config + free run
by_cfg = {}
for d in diags: by_cfg.setdefault(d[4], []).append(d)
curve = [d[2] for d in sorted(by_cfg[best.config_id])]
print("best curve (cycles 10+): max", max(curve[10:]), "min", min(curve[10:]))

prep = ex._prepare(cfg, data, params)
rmse = prep.rmse
fr = free_run_rmse(prep.z0, node, prep.decoder, prep.truth_flat, rmse)
print("free-run curve: first/last", fr[0], fr[-1])
ok = all(curve[k] < 0.1 and curve[k] < fr[k] for k in range(10, 40))
print("8b best-config criterion:", ok)

# uncertainty-estimator run: scalar MLE + jacobian background, best inflation
z_from = zt[:, :-1].reshape(-1, 64); z_to = zt[:, 1:].reshape(-1, 64)
est = fit_mle((z_from, z_to), node, kind="scalar")
print("scalar sigma_m:", est.std(64)[0])
cfg_ue = ex.ExperimentConfig(**{**base, "uncertainty": "scalar", "inflation": (1.02, 1.05, 1.10)})
rows_ue, _, fails_ue = ex.run_experiment(cfg_ue, dataset=data, sinr=params, dyn=node, estimator=est)
print("ue fails:", fails_ue)
for r in rows_ue: print("ue", r.config_id, r.inflation, r.mean_analysis_rmse)
best_ue = min(rows_ue, key=lambda r: r.mean_analysis_rmse)
print("ue best:", best_ue.mean_analysis_rmse, "ratio:", best_ue.mean_analysis_rmse/best.mean_analysis_rmse)

# zero-shot staggered
cfg_st = ex.ExperimentConfig(**{**base, "grid_mode": "staggered",
                                "sigma_m": (best.sigma_m,)})
rows_st, _, fails_st = ex.run_experiment(cfg_st, dataset=data, sinr=params, dyn=node)
print("staggered fails:", fails_st)
print("staggered mean rmse:", rows_st[0].mean_analysis_rmse,
      "ratio vs on-grid:", rows_st[0].mean_analysis_rmse/best.mean_analysis_rmse)

# masked encoding monotonicity
mrows = ex.run_masked_reconstruction(cfg, data, params,
                                     ratios=(0.30, 0.03), counts=(6,))
print("masked:", mrows)
print("TOTAL", time.perf_counter()-t0)
