import numpy as np, math, time, json
from sphassim import datasets as ds, sinr as si, dynamics as dy, training as tr
from sphassim.metrics import weighted_rmse, multi_step_pred_rmse
from sphassim.ltsr import save_params, save_ltsr

t00 = time.perf_counter()
# train set: 4 trajectories; held-out: 1 more trajectory (fresh seed)
data = ds.gen_synthetic_rotation(seed=11, n_traj=5, n_steps=48, ell_max=4,
                                 omega=2*math.pi/48, nlon=64, nlat=32).normalize()
train = ds.Dataset(values=data.values[:4], grid=data.grid, dt=data.dt,
                   channel_names=data.channel_names,
                   norm_mean=data.norm_mean, norm_std=data.norm_std)
dims = si.SinrDims(L=4, D=4, h=32, m=64, c=1)
params = si.init_sinr_params(dims, seed=0)
table = tr.LatentTable(4, 48, dims.m)
trace = tr.LossTrace()
stages = [(300, 1e-2, 3e-2), (200, 3e-3, 1e-2), (150, 1e-3, 3e-3)]
for ep, lrp, lrl in stages:
    params, table = tr.pretrain(train, params, table,
                                tr.TrainConfig(epochs=ep, lr_pretrain=lrp, lr_latent=lrl), trace)
    print(f"stage done: loss={trace.rows[-1][1]:.6f} t={time.perf_counter()-t00:.0f}s", flush=True)

node = dy.init_node_params(dims.m, widths=(128, 128), seed=0, scale=0.1, substeps=4)
ft_trace = tr.LossTrace()
for ep, lrf, lrl in ((200, 1e-3, 3e-3), (150, 3e-4, 1e-3)):
    params, table, node = tr.finetune(train, params, table, node,
        tr.TrainConfig(epochs=ep, lr_finetune=lrf, lr_latent=lrl), ft_trace)
    print(f"ft stage: recon={ft_trace.rows[-1][1]:.6f} pred={ft_trace.rows[-1][2]:.8f} t={time.perf_counter()-t00:.0f}s", flush=True)

# held-out encode quality
held = data.snapshot(4, 7)
enc = si.sinr_encode(params, held, opts=si.EncodeOptions(steps=1500, lr=3e-2, tol=1e-14))
dec = si.sinr_decode(params, enc.latent, data.grid)
rmse_held = weighted_rmse(held, dec)
curve = multi_step_pred_rmse(train, params, table, node, 5)
print("held-out recon rmse:", rmse_held, flush=True)
print("pred curve:", [round(x, 4) for x in curve], flush=True)

save_params(params.params, "/root/pkg/.cal/sinr.ltsr", meta=params.to_meta())
save_params(node.params, "/root/pkg/.cal/dyn.ltsr", meta=node.to_meta())
save_ltsr(table.z, "/root/pkg/.cal/latents.ltsr")
data.save("/root/pkg/.cal/data5.ltsr")
json.dump({"rmse_held": rmse_held, "curve": curve,
           "total_s": time.perf_counter()-t00}, open("/root/pkg/.cal/summary.json","w"))
print("TOTAL", time.perf_counter()-t00, flush=True)
