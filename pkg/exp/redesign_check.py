import numpy as np
import sys, time
sys.path.insert(0, "src")
from mimo_adapt.channel import SystemConfig
from mimo_adapt.channel import ChannelTask, sample_channels
from mimo_adapt.precoders import make_model, vecri_np
from mimo_adapt.autodiff import Tape
from mimo_adapt.training import _param_nodes
from mimo_adapt.kernels import _numpy as knp

cfg = SystemConfig()
model = make_model("fpn", cfg)
rng = np.random.default_rng(3)
params = model.init_params(rng)
print("param count:", params.num_scalars())
for n in params.names():
    print(" ", n, params.get(n).shape)

task = ChannelTask(task_id=9, rho_tx=0.9, rho_rx=0.9, seed=90)
h = sample_channels(task, cfg, 16, np.random.default_rng(11))
noise = np.full(16, cfg.noise_power)
p = cfg.total_power

hn, noise_n = model.normalize_channel(h, noise)
state = model.init_state(hn, p)

# feature magnitude calibration at init
herm = lambda x: np.conj(np.swapaxes(x, -1, -2))
for step in range(6):
    hv = hn[:, :, None] @ state["v"][:, None]
    cov = (hv @ herm(hv)).sum(axis=2) + noise_n[:, None, None, None] * np.eye(cfg.rx_antennas)
    hvk = hv[:, np.arange(cfg.num_users), np.arange(cfg.num_users)]
    u, w, v = state["u"], state["w"], state["v"]
    e = np.eye(cfg.streams_per_user, dtype=np.complex128) - herm(u) @ hvk
    t = herm(hn) @ u
    c = t @ w
    a = (c @ herm(t)).sum(axis=1)
    pw = np.sum(np.abs(v) ** 2, axis=(1, 2, 3))
    print(f"step {step}: cov rms {np.sqrt(np.mean(np.abs(cov)**2)):.3f}  "
          f"e rms {np.sqrt(np.mean(np.abs(e)**2)):.3f}  "
          f"a rms {np.sqrt(np.mean(np.abs(a)**2)):.4f}  "
          f"v power {pw.mean():.3f}")
    state = model.map_np(params, hn, noise_n, state, p)

# pre-projection power of the raw v (rerun last map manually)
hv = hn[:, :, None] @ state["v"][:, None]
cov = (hv @ herm(hv)).sum(axis=2) + noise_n[:, None, None, None] * np.eye(cfg.rx_antennas)
hvk = hv[:, np.arange(cfg.num_users), np.arange(cfg.num_users)]
iu = model._batch_net_np(params, "fpn.u", model.scales.feat_b * vecri_np(cov))
from mimo_adapt.precoders import unvecri_np
iu = unvecri_np(iu, cfg.rx_antennas, cfg.rx_antennas)
u = model.scales.out_u * (iu @ hvk)
e = np.eye(cfg.streams_per_user, dtype=np.complex128) - herm(u) @ hvk
w = model.scales.out_w * unvecri_np(model._batch_net_np(params, "fpn.w", model.scales.feat_e * vecri_np(e)), cfg.streams_per_user, cfg.streams_per_user)
t = herm(hn) @ u
c = t @ w
a = (c @ herm(t)).sum(axis=1)
iv = unvecri_np(model._sample_net_np(params, "fpn.v", model.scales.feat_a * vecri_np(a)), cfg.tx_antennas, cfg.tx_antennas)
vraw = model.scales.out_v * np.einsum("bts,bksd->bktd", iv, c)
print("pre-projection power:", np.sum(np.abs(vraw) ** 2, axis=(1, 2, 3)).mean())

# solver convergence at init
t0 = time.time()
v, iters, st, res = model.solve(params, h, noise, p, raise_on_fail=False)
print(f"solve: iters mean {iters.mean():.1f} max {iters.max()}  residual max {res.max():.2e}  [{time.time()-t0:.1f}s]")

# tape/numpy parity of one map application at the solved state
tape = Tape()
nodes = _param_nodes(tape, params)
v_cat = model.build_graph(tape, nodes, h, noise, p, state=st)
new = model.map_np(params, hn, noise_n, st, p)
v_np = np.concatenate([new["v"][:, i] for i in range(cfg.num_users)], axis=-1)
print("tape/numpy parity:", np.abs(v_cat.value - v_np).max())

# rate at init (buying sanity)
rate = knp.sum_rate(h, v.reshape(16, cfg.num_users, cfg.tx_antennas, cfg.streams_per_user) if v.ndim != 4 else v, noise)
print("init rate:", rate.mean())
