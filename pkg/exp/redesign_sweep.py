import numpy as np
import sys, time
sys.path.insert(0, "src")
from mimo_adapt.channel import SystemConfig, ChannelTask, build_dataset, make_task_suite
from mimo_adapt.precoders import make_model
from mimo_adapt.training import joint_train, TrainOptions, evaluate_rate
from scipy.stats import spearmanr

cfg = SystemConfig()
training, testing = make_task_suite(cfg)

POOL = 4000
DATA_SEED = 555
TRAIN_SEED = 7

test_data = build_dataset(testing, cfg, 16, 1000, seed=1000 + DATA_SEED)
noise = cfg.noise_power
model = make_model("fpn", cfg)

own_rates, test_rates = [], []
for idx in [0, 7]:
    task = training[idx]
    crn = ChannelTask(task_id=task.task_id, rho_tx=task.rho_tx,
                      rho_rx=task.rho_rx, seed=DATA_SEED)
    data = build_dataset(crn, cfg, 16, POOL, seed=DATA_SEED)
    params = model.init_params(np.random.default_rng(TRAIN_SEED))
    opts = TrainOptions(seed=TRAIN_SEED)
    t0 = time.time()
    params = joint_train(model, [data], opts, params=params)
    dt = time.time() - t0
    own = evaluate_rate(model, params, data.query_stack[:1000], noise)
    test = evaluate_rate(model, params, test_data.query_stack[:1000], noise)
    # convergence of the trained map from a cold start
    v, iters, st, res = model.solve(params, test_data.query_stack[:200], np.full(200, noise),
                                    cfg.total_power, raise_on_fail=False)
    own_rates.append(own); test_rates.append(test)
    print(f"task{idx+1}: own {own:.3f}  test {test:.3f}  "
          f"solve iters mean {iters.mean():.0f} max {iters.max()} resid max {res.max():.1e}  [{dt:.0f}s]",
          flush=True)

print("transfer:", [round(r, 3) for r in test_rates])
print("own:     ", [round(r, 3) for r in own_rates])
rho, _ = spearmanr(np.arange(len(test_rates)), test_rates)
print("spearman:", round(rho, 3))

