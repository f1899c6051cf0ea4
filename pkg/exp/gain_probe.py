import numpy as np
import sys, time
sys.path.insert(0, "src")
from mimo_adapt.channel import SystemConfig, ChannelTask, build_dataset, make_task_suite
from mimo_adapt.precoders import make_model
from mimo_adapt.training import joint_train, TrainOptions, evaluate_rate

cfg = SystemConfig()
training, testing = make_task_suite(cfg)
POOL, DATA_SEED, TRAIN_SEED = 4000, 555, 7
test_data = build_dataset(testing, cfg, 16, 1000, seed=1000 + DATA_SEED)
noise = cfg.noise_power
model = make_model("fpn", cfg)

def solve_stats(params, stack, n=200):
    v, iters, st, res = model.solve(params, stack[:n], np.full(n, noise),
                                    cfg.total_power, raise_on_fail=False)
    conv = int((res < model.eps).sum())
    rate = evaluate_rate(model, params, stack[:n], noise)
    return conv, n, res.max(), rate

# 1. zero-net map (pure anchored matched-filter iteration)
zero = model.init_params(np.random.default_rng(TRAIN_SEED))
for name in zero.names():
    zero.set(name, np.zeros_like(zero.get(name)))
conv, n, rmax, rate = solve_stats(zero, test_data.query_stack)
print(f"zero-net: conv {conv}/{n}  resid max {rmax:.2e}  rate {rate:.3f}", flush=True)

# 2. trained on task8, then net-correction shrink sweep
task = training[7]
crn = ChannelTask(task_id=task.task_id, rho_tx=task.rho_tx, rho_rx=task.rho_rx,
                  seed=DATA_SEED)
data = build_dataset(crn, cfg, 16, POOL, seed=DATA_SEED)
params = model.init_params(np.random.default_rng(TRAIN_SEED))
t0 = time.time()
params = joint_train(model, [data], TrainOptions(seed=TRAIN_SEED), params=params)
print(f"trained task8 [{time.time()-t0:.0f}s]", flush=True)
params.save("/tmp/fpn_task8.params")

for s in (1.0, 0.6, 0.3, 0.15):
    scaled = params.clone()
    for sub in ("u", "w", "v"):
        scaled.set(f"fpn.{sub}.w2", s * scaled.get(f"fpn.{sub}.w2"))
        scaled.set(f"fpn.{sub}.b2", s * scaled.get(f"fpn.{sub}.b2"))
    c_own, n, r_own, rate_own = solve_stats(scaled, data.query_stack)
    c_t, _, r_t, rate_t = solve_stats(scaled, test_data.query_stack)
    print(f"s={s}: own conv {c_own}/{n} resid {r_own:.1e} rate {rate_own:.3f} | "
          f"test conv {c_t}/{n} resid {r_t:.1e} rate {rate_t:.3f}", flush=True)
