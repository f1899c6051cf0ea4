import numpy as np
import sys, time
sys.path.insert(0, "src")
from mimo_adapt.channel import SystemConfig, ChannelTask, build_dataset, sample_channels
from mimo_adapt.precoders import make_model
from mimo_adapt.autodiff import Tape
from mimo_adapt.training import _param_nodes

cfg = SystemConfig()
model = make_model("fpn", cfg)
params = model.init_params(np.random.default_rng(3))

task = ChannelTask(task_id="t", rho_tx=0.9, rho_rx=0.9, seed=90)
h = sample_channels(task, cfg, 32, np.random.default_rng(11))
noise = np.full(32, cfg.noise_power)
p = cfg.total_power
hn, noise_n = model.normalize_channel(h, noise)

# solver behavior at init params
t0 = time.time()
v, iters, st, res = model.solve(params, h, noise, p, raise_on_fail=False)
print(f"solve@init: iters mean {iters.mean():.1f} max {iters.max()}  resid max {res.max():.2e}  [{time.time()-t0:.1f}s]")

# parity
tape = Tape()
nodes = _param_nodes(tape, params)
v_cat = model.build_graph(tape, nodes, h, noise, p, state=st)
new = model.map_np(params, hn, noise_n, st, p)
v_np = np.concatenate([new["v"][:, i] for i in range(cfg.num_users)], axis=-1)
print("tape/numpy parity:", np.abs(v_cat.value - v_np).max())

# empirical Lipschitz ratio on random state pairs (single channel at a time)
rng = np.random.default_rng(5)
k, nr, nt, d = cfg.num_users, cfg.rx_antennas, cfg.tx_antennas, cfg.streams_per_user

def rand_state(b):
    from mimo_adapt.wmmse import project_power
    cplx = lambda sh, s: s * (rng.standard_normal(sh) + 1j * rng.standard_normal(sh))
    return {"u": cplx((b, k, nr, d), 0.3), "w": cplx((b, k, d, d), 0.5),
            "v": project_power(cplx((b, k, nt, d), 0.3), p)}

def flat(state):
    return np.concatenate([state[key].reshape(state[key].shape[0], -1)
                           for key in ("u", "w", "v")], axis=1)

ratios = []
for trial in range(100):
    hi = hn[trial % 32 : trial % 32 + 1]
    ni = noise_n[trial % 32 : trial % 32 + 1]
    s1, s2 = rand_state(1), rand_state(1)
    f1 = model.map_np(params, hi, ni, s1, p)
    f2 = model.map_np(params, hi, ni, s2, p)
    num = np.linalg.norm(flat(f1) - flat(f2))
    den = np.linalg.norm(flat(s1) - flat(s2))
    ratios.append(num / den)
ratios = np.array(ratios)
print(f"lipschitz ratios: max {ratios.max():.3f}  mean {ratios.mean():.3f}  >1 count {int((ratios>=1).sum())}")
