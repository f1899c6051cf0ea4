"""Training and adaptation regimes for the learned precoders.

One shared episode sampler drives every regime: at iteration t the task
index comes from substream (seed, t, 0) and the batch indices from
(seed, t, 1).  Because the streams are keyed by purpose rather than by
consumption order, maml_train with zero inner steps and multitask_train
with one task replay joint_train's arithmetic bit for bit.

Losses are unsupervised throughout: minus the batch-mean sum rate of the
model's precoder output.  Support sets feed gradients; query sets are
evaluated with the plain numpy forward and never appear on a tape.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .precoders import TASK as TASK_PART
from .precoders import _param_nodes, lipschitz_project, pack_gradient
from .wmmse import negative_sum_rate_graph_cat, sum_rate

DEFAULT_TRAIN_SNR_DB = 20.0
FPN_TRAIN_EPS = 1e-3
SGD = "sgd"
ADAM = "adaptive-moment"
LOG_HEADER = ["iteration", "task_id", "loss", "query_rate", "wall_time_s"]


@dataclass(frozen=True)
class TrainOptions:
    learning_rate: float = 1e-3
    iterations: int = 2000
    batch_size: int = 8
    optimizer: str = ADAM
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.optimizer not in (SGD, ADAM):
            raise ValueError(f"optimizer must be '{SGD}' or '{ADAM}'")


@dataclass
class AdaptationReport:
    rate_per_iteration: list
    iterations_to_95pct: int
    final_rate: float
    wall_time: float


@dataclass
class MultiTaskParams:
    shared: "ParamStore"
    task_specific: list
    canonical_names: list = field(default_factory=list)


def default_noise(model):
    return model.total_power * 10.0 ** (-DEFAULT_TRAIN_SNR_DB / 10.0)


# -- optimizers -----------------------------------------------------------------

class SgdOptimizer:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, g in grads.items():
            params.set(name, params.get(name) - self.lr * g)


class AdamOptimizer:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, params, grads):
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            denom = np.sqrt(v / (1 - self.beta2 ** t))
            denom += self.eps
            upd = m / (1 - self.beta1 ** t)
            upd /= denom
            params.set(name, params.get(name) - self.lr * upd)


def make_optimizer(opts):
    if opts.optimizer == SGD:
        return SgdOptimizer(opts.learning_rate)
    return AdamOptimizer(opts.learning_rate)


def decayed_lr(base, t, total):
    # cosine decay across the run; at a fixed rate the terminal update noise
    # is larger than the cross-task rate differences we need to resolve
    return base * 0.5 * (1.0 + np.cos(np.pi * t / max(total, 1)))


# -- episode sampling ------------------------------------------------------------

def _substream(seed, t, purpose):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, t, purpose))))


def pick_task(seed, t, n_tasks):
    return int(_substream(seed, t, 0).integers(0, n_tasks))


def pick_batch(seed, t, n_samples, batch_size):
    size = min(batch_size, n_samples)
    return _substream(seed, t, 1).choice(n_samples, size=size, replace=False)


# -- fpn warm-start cache ---------------------------------------------------------

class FpnStateCache:
    """Per-dataset fixed-point states reused across iterations as warm starts."""

    def __init__(self, model, p_max):
        self.model = model
        self.p_max = p_max
        self._states = {}

    def _ensure(self, key, h_stack):
        if key not in self._states:
            hn, _ = self.model.normalize_channel(h_stack, 1.0)
            self._states[key] = self.model.init_state(hn, self.p_max)
        return self._states[key]

    def take(self, key, h_stack, idx):
        states = self._ensure(key, h_stack)
        return {k: v[idx] for k, v in states.items()}

    def put(self, key, idx, state):
        for k, v in state.items():
            self._states[key][k][idx] = v


# -- graph construction ------------------------------------------------------------

def training_loss(model, params, h, noise, *, fpn_cache=None, cache_key=None,
                  cache_idx=None, h_stack=None, train_eps=FPN_TRAIN_EPS,
                  fpn_transient_steps=0):
    """Build the differentiable loss for one batch; returns (tape, nodes, loss).

    For the fixed-point model the equilibrium is found tape-free first and
    the graph differentiates one application of the map at that point.
    fpn_transient_steps > 0 instead anchors the application at the state
    reached by that many map steps from a cold start, so the map also
    learns to improve the early iterates it must pass through when
    deployed on unseen channel statistics.
    """
    from .autodiff import Tape

    tape = Tape()
    nodes = _param_nodes(tape, params)
    p_max = model.total_power
    if model.kind == "fpn":
        if fpn_transient_steps > 0:
            hn, noise_n = model.normalize_channel(h, noise)
            state = model.init_state(hn, p_max)
            for _ in range(fpn_transient_steps):
                state = model.map_np(params, hn, noise_n, state, p_max)
        else:
            state0 = None
            if fpn_cache is not None:
                state0 = fpn_cache.take(cache_key, h_stack, cache_idx)
            _, _, state, _ = model.solve(params, h, noise, p_max, eps=train_eps,
                                         state=state0, raise_on_fail=False)
            if fpn_cache is not None:
                fpn_cache.put(cache_key, cache_idx, state)
        v_cat = model.build_graph(tape, nodes, h, noise, p_max, state=state)
    else:
        v_cat = model.build_graph(tape, nodes, h, noise, p_max)
    loss = negative_sum_rate_graph_cat(tape, h, v_cat, noise)
    return tape, nodes, loss


def loss_gradients(model, params, h, noise, trainable=None, **kw):
    """Gradient dict name -> float64 array in storage layout, plus the loss value."""
    tape, nodes, loss = training_loss(model, params, h, noise, **kw)
    adjoints = tape.backward(loss)
    grads = {}
    for name, node in nodes.items():
        if trainable is not None and name not in trainable:
            continue
        if node.nid in adjoints:
            grads[name] = pack_gradient(params, name, adjoints[node.nid])
    return grads, float(loss.value.real[0, 0])


def _post_update(model, params):
    if model.kind == "fpn":
        lipschitz_project(params, model.gamma)


def evaluate_rate(model, params, h, noise, *, fpn_cache=None, cache_key=None):
    """Mean sum rate of the numpy forward on a stack of channels."""
    p_max = model.total_power
    if model.kind == "fpn":
        state0 = None
        idx = np.arange(h.shape[0])
        if fpn_cache is not None:
            state0 = fpn_cache.take(cache_key, h, idx)
        v, _, state, _ = model.solve(params, h, noise, p_max, state=state0,
                                     raise_on_fail=False)
        if fpn_cache is not None:
            fpn_cache.put(cache_key, idx, state)
    else:
        v = model.forward(params, h, noise, p_max)
    return float(np.mean(sum_rate(h, v, noise)))


class _TrainLog:
    def __init__(self, path):
        self.path = path
        self._t0 = time.perf_counter()
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_HEADER)

    def row(self, iteration, task_id, loss, query_rate=""):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(
                [iteration, task_id, f"{loss:.6f}", query_rate,
                 f"{time.perf_counter() - self._t0:.3f}"])

    def maybe_query_rate(self, iteration, model, params, stack, noise):
        """Sparse held-out evaluation; cache-free so logging never perturbs training."""
        if self.path is None or iteration % 100 != 0:
            return ""
        sub = stack[:min(64, stack.shape[0])]
        return f"{evaluate_rate(model, params, sub, noise):.4f}"


# -- regimes ----------------------------------------------------------------------

def _check_finite(loss, t):
    if not np.isfinite(loss):
        raise RuntimeError(f"training loss diverged (non-finite) at iteration {t}")


def _transient_steps(t):
    # odd iterations anchor the fpn gradient at a cold-start transient state
    # (cycling 1..3 map steps), even ones at the equilibrium; other models
    # ignore the argument entirely
    return 0 if t % 2 == 0 else 1 + (t // 2) % 3


def joint_train(model, tasks, opts, noise=None, params=None, log_path=None,
                trainable=None, optimizer=None, grad_hook=None):
    """Minimize the negative sum rate over batches drawn uniformly across tasks.

    `tasks` is a list of TaskDataset; batches come from each task's query
    stack (the abundant split; support stays reserved for adaptation). The
    learning rate follows a cosine decay from opts.learning_rate to ~0 over
    the run, also when the optimizer is caller-supplied.
    """
    if not tasks:
        raise ValueError("need at least one task dataset")
    noise = default_noise(model) if noise is None else noise
    if params is None:
        params = model.init_params(np.random.default_rng(opts.seed))
    opt = optimizer if optimizer is not None else make_optimizer(opts)
    cache = FpnStateCache(model, model.total_power) if model.kind == "fpn" else None
    log = _TrainLog(log_path)
    for t in range(opts.iterations):
        n = pick_task(opts.seed, t, len(tasks))
        data = tasks[n]
        stack = data.query_stack
        idx = pick_batch(opts.seed, t, stack.shape[0], opts.batch_size)
        h = stack[idx]
        grads, loss = loss_gradients(
            model, params, h, noise, trainable=trainable,
            fpn_cache=cache, cache_key=data.task.task_id, cache_idx=idx, h_stack=stack,
            fpn_transient_steps=_transient_steps(t))
        _check_finite(loss, t)
        if grad_hook is not None:
            grads = grad_hook(t, n, grads)
        opt.lr = decayed_lr(opts.learning_rate, t, opts.iterations)
        opt.step(params, grads)
        _post_update(model, params)
        log.row(t, data.task.task_id, loss,
                log.maybe_query_rate(t, model, params, stack, noise))
    return params


def fine_tune(model, params, support, query, opts, noise=None, trainable=None,
              fpn_query_cache=None, on_iteration=None):
    """Adapt on the support set; record query rate before and after each step.

    on_iteration(t, params), when given, fires right after the rate for
    iteration t is recorded (t=0 is the pre-adaptation model). Callers use it
    to evaluate the same trajectory at other noise levels.
    """
    noise = default_noise(model) if noise is None else noise
    support = np.asarray(support)
    query = np.asarray(query)
    params = params.clone()
    opt = make_optimizer(opts)
    sup_cache = FpnStateCache(model, model.total_power) if model.kind == "fpn" else None
    q_cache = fpn_query_cache
    if q_cache is None and model.kind == "fpn":
        q_cache = FpnStateCache(model, model.total_power)
    t_start = time.perf_counter()
    rates = [evaluate_rate(model, params, query, noise,
                           fpn_cache=q_cache, cache_key="query")]
    if on_iteration is not None:
        on_iteration(0, params)
    sup_idx = np.arange(support.shape[0])
    for t in range(opts.iterations):
        grads, loss = loss_gradients(
            model, params, support, noise, trainable=trainable,
            fpn_cache=sup_cache, cache_key="support", cache_idx=sup_idx,
            h_stack=support)
        _check_finite(loss, t)
        opt.step(params, grads)
        _post_update(model, params)
        rates.append(evaluate_rate(model, params, query, noise,
                                   fpn_cache=q_cache, cache_key="query"))
        if on_iteration is not None:
            on_iteration(t + 1, params)
    final = rates[-1]
    reached = [i for i, r in enumerate(rates) if r >= 0.95 * final]
    report = AdaptationReport(rate_per_iteration=rates,
                              iterations_to_95pct=reached[0] if reached else len(rates) - 1,
                              final_rate=final,
                              wall_time=time.perf_counter() - t_start)
    return params, report


def maml_train(model, tasks, inner_steps, inner_lr, outer_opts, noise=None,
               log_path=None, params=None):
    """First-order MAML: query-set gradients at support-adapted parameters.

    Inner steps are plain SGD at a fixed inner_lr; the outer rate follows
    the same cosine decay as joint_train.
    """
    if inner_steps < 0:
        raise ValueError("inner_steps must be non-negative")
    noise = default_noise(model) if noise is None else noise
    if params is None:
        params = model.init_params(np.random.default_rng(outer_opts.seed))
    opt = make_optimizer(outer_opts)
    cache = FpnStateCache(model, model.total_power) if model.kind == "fpn" else None
    support_caches = {}
    log = _TrainLog(log_path)
    for t in range(outer_opts.iterations):
        n = pick_task(outer_opts.seed, t, len(tasks))
        data = tasks[n]
        stack = data.query_stack
        idx = pick_batch(outer_opts.seed, t, stack.shape[0], outer_opts.batch_size)
        h_query = stack[idx]

        adapted = params
        inner_cache = None
        if inner_steps > 0:
            adapted = params.clone()
            sup = data.support_stack
            sup_idx = np.arange(sup.shape[0])
            if model.kind == "fpn":
                # persistent across meta-iterations: parameters drift slowly
                # between visits, so the stale support states stay warm
                inner_cache = support_caches.setdefault(
                    n, FpnStateCache(model, model.total_power))
            for _ in range(inner_steps):
                grads, loss = loss_gradients(
                    model, adapted, sup, noise,
                    fpn_cache=inner_cache, cache_key="inner", cache_idx=sup_idx,
                    h_stack=sup)
                _check_finite(loss, t)
                for name, g in grads.items():
                    adapted.set(name, adapted.get(name) - inner_lr * g)
                _post_update(model, adapted)

        grads, loss = loss_gradients(
            model, adapted, h_query, noise,
            fpn_cache=cache, cache_key=data.task.task_id, cache_idx=idx, h_stack=stack,
            fpn_transient_steps=_transient_steps(t))
        _check_finite(loss, t)
        opt.lr = decayed_lr(outer_opts.learning_rate, t, outer_opts.iterations)
        opt.step(params, grads)
        _post_update(model, params)
        log.row(t, data.task.task_id, loss,
                log.maybe_query_rate(t, model, params, stack, noise))
    return params


# -- multi-task -------------------------------------------------------------------

def split_params(params):
    """Partition a full store into (shared, task_specific) stores."""
    from .precoders import ParamStore, TASK

    shared, task = ParamStore(), ParamStore()
    for name, arr in params.items():
        part = params.partition(name)
        (task if part == TASK else shared).add(name, arr.copy(), part)
    return shared, task


def merge_params(canonical_names, shared, task):
    """Rebuild a full store, preserving the model's canonical parameter order."""
    from .precoders import ParamStore

    out = ParamStore()
    for name in canonical_names:
        src = task if name in task else shared
        out.add(name, src.get(name).copy(), src.partition(name))
    if set(out.names()) != set(shared.names()) | set(task.names()):
        raise ValueError("shared and task-specific parts do not cover the model")
    return out


def multitask_train(model, tasks, opts, noise=None, log_path=None):
    """Learn one shared trunk plus a task-specific head per training task.

    Optimization matches joint_train step for step (same batch schedule and
    cosine decay), so a single-task run reproduces joint_train exactly.
    """
    if not tasks:
        raise ValueError("need at least one task dataset")
    noise = default_noise(model) if noise is None else noise
    full = model.init_params(np.random.default_rng(opts.seed), multitask=True)
    canonical = full.names()
    head_names = [n for n in canonical if full.partition(n) == TASK_PART]
    if not head_names:
        raise ValueError("model declares no task-specific partition")
    heads = []
    for _ in tasks:
        h = split_params(full)[1]
        heads.append(h.clone())
    # one optimizer for the trunk, one per head: moment state must not leak
    # between tasks that share parameter names
    opt_shared = make_optimizer(opts)
    opt_heads = [make_optimizer(opts) for _ in tasks]
    cache = FpnStateCache(model, model.total_power) if model.kind == "fpn" else None
    log = _TrainLog(log_path)
    head_set = set(head_names)
    for t in range(opts.iterations):
        n = pick_task(opts.seed, t, len(tasks))
        data = tasks[n]
        stack = data.query_stack
        idx = pick_batch(opts.seed, t, stack.shape[0], opts.batch_size)
        for name in head_names:
            full.set(name, heads[n].get(name))
        grads, loss = loss_gradients(
            model, full, stack[idx], noise,
            fpn_cache=cache, cache_key=data.task.task_id, cache_idx=idx, h_stack=stack,
            fpn_transient_steps=_transient_steps(t))
        _check_finite(loss, t)
        opt_shared.lr = opt_heads[n].lr = decayed_lr(
            opts.learning_rate, t, opts.iterations)
        opt_shared.step(full, {k: g for k, g in grads.items() if k not in head_set})
        opt_heads[n].step(full, {k: g for k, g in grads.items() if k in head_set})
        _post_update(model, full)
        for name in head_names:
            heads[n].set(name, full.get(name))
        log.row(t, data.task.task_id, loss,
                log.maybe_query_rate(t, model, full, stack, noise))
    shared = split_params(full)[0]
    return MultiTaskParams(shared=shared, task_specific=heads,
                           canonical_names=canonical)


def adapt_multitask(model, mt, support, query, opts, noise=None, on_iteration=None):
    """Fine-tune a fresh head (mean of the trained heads) with the trunk frozen."""
    from .precoders import ParamStore

    head_names = mt.task_specific[0].names()
    v_new = ParamStore()
    for name in head_names:
        stackd = np.stack([h.get(name) for h in mt.task_specific])
        v_new.add(name, stackd.mean(axis=0), mt.task_specific[0].partition(name))
    params = merge_params(mt.canonical_names, mt.shared, v_new)
    return fine_tune(model, params, support, query, opts, noise=noise,
                     trainable=set(head_names), on_iteration=on_iteration)
