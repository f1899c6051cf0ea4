"""Experiment harness: cross-task transfer tables and adaptation-efficiency curves.

Everything here composes the channel suite, the WMMSE baseline, and the
training regimes into reproducible result tables.  One top-level seed in
ExperimentConfig pins every random stream (dataset sampling, parameter
init, episode order), so rerunning a config byte-reproduces results.csv.

Row schema is fixed: method, regime, train_task, test_task, snr_db,
sum_rate_bits_s_hz, iterations_used, seed.  For transfer rows
iterations_used is the training budget that produced the entry; for
adaptation-curve rows it is the fine-tune iteration index (0 = before
the first gradient step), so a curve is the set of rows sharing
(method, regime, snr_db).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .channel import SystemConfig, SuiteSpec, make_task_suite, build_dataset, suite_to_json
from .precoders import make_model, ParamStore
from .training import (TrainOptions, FpnStateCache, evaluate_rate, fine_tune,
                       joint_train, maml_train, multitask_train, adapt_multitask,
                       merge_params)
from .wmmse import wmmse_solve

METHOD_WMMSE = "wmmse"
LEARNED_METHODS = ("blackbox", "unfolded", "fpn")
ALL_METHODS = (METHOD_WMMSE,) + LEARNED_METHODS

REGIME_PER_TASK = "per-task-train"
REGIME_JOINT = "joint+finetune"
REGIME_MAML = "maml+finetune"
REGIME_MULTITASK = "multitask"
REGIME_UPPERBOUND = "upperbound"  # emitted as a reference, never requested
ALL_REGIMES = (REGIME_PER_TASK, REGIME_JOINT, REGIME_MAML, REGIME_MULTITASK)
ADAPT_REGIMES = (REGIME_JOINT, REGIME_MAML, REGIME_MULTITASK)

CSV_HEADER = "method,regime,train_task,test_task,snr_db,sum_rate_bits_s_hz,iterations_used,seed"

# integer tags for seed derivation; values are arbitrary but frozen
_ROLE_DATA = 1
_ROLE_PER_TASK = 2
_ROLE_JOINT = 3
_ROLE_MAML = 4
_ROLE_MULTITASK = 5
_ROLE_UPPERBOUND = 6
_ROLE_TEST_DATA = 7
_METHOD_TAG = {m: i for i, m in enumerate(ALL_METHODS)}

DEFAULT_BUDGETS = {"blackbox": 30, "unfolded": 20, "fpn": 15}
DEFAULT_SNR_GRID = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)

# single-task transfer entries sit within seed noise of each other for the
# unfolded model, so its cells are averaged over this many training replicates
PER_TASK_REPLICATES = {"unfolded": 2}

ZERO_SHOT_TOL = 1e-9  # curve start must match the independent zero-shot eval


def derive_seed(*parts):
    """Stable 64-bit substream seed from integer parts."""
    return int(np.random.SeedSequence(tuple(int(p) for p in parts))
               .generate_state(1, np.uint64)[0])


# -- configuration ----------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything a full run needs; mirrors field-for-field to JSON."""

    system: SystemConfig = field(default_factory=SystemConfig)
    suite: SuiteSpec = field(default_factory=SuiteSpec)
    methods: tuple = ALL_METHODS
    regimes: tuple = ALL_REGIMES
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    maml_budget: int = 6
    snr_eval_grid: tuple = DEFAULT_SNR_GRID
    output_dir: str = "results"
    seed: int = 0
    train_iterations: int = 2000
    meta_iterations: int = 2000
    inner_steps: int = 3
    inner_lr: float = 1e-2
    train_lr: float = 1e-3
    adapt_lr: float = 1e-2
    batch_size: int = 8
    support_size: int = 16
    query_size: int = 1000
    train_pool_size: int = 4000
    curve_iterations: int = 30

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.regimes = tuple(self.regimes)
        self.snr_eval_grid = tuple(float(s) for s in self.snr_eval_grid)
        if not self.methods:
            raise ValueError("methods must not be empty")
        if not self.regimes:
            raise ValueError("regimes must not be empty")
        for m in self.methods:
            if m not in ALL_METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {ALL_METHODS}")
        for r in self.regimes:
            if r not in ALL_REGIMES:
                raise ValueError(f"unknown regime {r!r}; choose from {ALL_REGIMES}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("duplicate entries in methods")
        if len(set(self.regimes)) != len(self.regimes):
            raise ValueError("duplicate entries in regimes")
        if not self.snr_eval_grid:
            raise ValueError("snr_eval_grid must not be empty")
        for m, b in self.budgets.items():
            if m not in LEARNED_METHODS:
                raise ValueError(f"budget given for unknown method {m!r}")
            if int(b) < 1:
                raise ValueError(f"budget for {m!r} must be at least 1")
        if self.maml_budget < 1:
            raise ValueError("maml_budget must be at least 1")
        for name in ("train_iterations", "meta_iterations", "inner_steps",
                     "batch_size", "support_size", "query_size", "curve_iterations"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be non-negative")
        if int(self.train_pool_size) < int(self.query_size):
            raise ValueError("train_pool_size must be at least query_size")

    def budget_for(self, method, regime):
        """Declared adaptation operating point for a (method, regime) cell."""
        if regime == REGIME_MAML:
            return int(self.maml_budget)
        return int(self.budgets.get(method, self.curve_iterations))

    def learned_methods(self):
        return [m for m in self.methods if m in LEARNED_METHODS]

    def to_dict(self):
        d = asdict(self)
        d["system"] = self.system.to_dict()
        d["suite"] = self.suite.to_dict()
        d["methods"] = list(self.methods)
        d["regimes"] = list(self.regimes)
        d["snr_eval_grid"] = list(self.snr_eval_grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "system" in d:
            d["system"] = SystemConfig.from_dict(d["system"])
        if "suite" in d:
            d["suite"] = SuiteSpec.from_dict(d["suite"])
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# -- result rows ------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    regime: str
    train_task: str
    test_task: str
    snr_db: float
    sum_rate_bits_s_hz: float
    iterations_used: int
    seed: int

    def key(self):
        return (self.method, self.regime, self.train_task, self.test_task,
                self.snr_db, self.iterations_used, self.seed)


class ResultTable:
    """Append-only row collection with a canonical order and exact CSV round trip."""

    def __init__(self, rows=None):
        self.rows = list(rows) if rows else []

    def add(self, **kw):
        self.rows.append(ResultRow(**kw))

    def extend(self, other):
        self.rows.extend(other.rows)

    def sort(self):
        self.rows.sort(key=ResultRow.key)
        return self

    def filtered(self, **match):
        keep = [r for r in self.rows
                if all(getattr(r, k) == v for k, v in match.items())]
        return ResultTable(keep)

    def curve(self, method, regime, snr_db):
        """Rates indexed by fine-tune iteration for one adaptation cell."""
        rows = self.filtered(method=method, regime=regime, snr_db=float(snr_db)).rows
        rows.sort(key=lambda r: r.iterations_used)
        return [r.sum_rate_bits_s_hz for r in rows]

    def to_csv(self):
        # repr round-trips float64 exactly, which keeps reruns byte-identical
        lines = [CSV_HEADER]
        for r in self.rows:
            lines.append(",".join([r.method, r.regime, r.train_task, r.test_task,
                                   repr(float(r.snr_db)),
                                   repr(float(r.sum_rate_bits_s_hz)),
                                   str(int(r.iterations_used)), str(int(r.seed))]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln]
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError("result CSV must start with the canonical header")
        table = cls()
        for ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != 8:
                raise ValueError(f"malformed result row: {ln!r}")
            table.add(method=parts[0], regime=parts[1], train_task=parts[2],
                      test_task=parts[3], snr_db=float(parts[4]),
                      sum_rate_bits_s_hz=float(parts[5]),
                      iterations_used=int(parts[6]), seed=int(parts[7]))
        return table

    def to_dicts(self):
        return [asdict(r) for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, ResultTable) and self.rows == other.rows


# -- shared experiment state ------------------------------------------------------

class Workspace:
    """Task suite plus per-task datasets, built once per run.

    All training tasks of one replicate share a single dataset seed, so their
    channel draws are common random numbers shaped only by each task's
    correlation: cross-task rate differences then reflect the environments,
    not which white samples a task happened to get.  Training pools are
    train_pool_size wide; every evaluation slices to the first query_size.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.train_tasks, self.test_task = make_task_suite(cfg.system, cfg.suite)
        self._replicates = {}
        self.train_data = self.train_replicate(0)
        self.test_data = build_dataset(
            self.test_task, cfg.system, cfg.support_size, cfg.query_size,
            seed=derive_seed(cfg.seed, _ROLE_TEST_DATA, self.test_task.seed))
        self.all_data = self.train_data + [self.test_data]
        self._models = {}

    def train_replicate(self, r):
        if r not in self._replicates:
            cfg = self.cfg
            seed = derive_seed(cfg.seed, _ROLE_DATA, r)
            self._replicates[r] = [
                build_dataset(task, cfg.system, cfg.support_size,
                              cfg.train_pool_size, seed=seed)
                for task in self.train_tasks]
        return self._replicates[r]

    def eval_queries(self, data):
        return data.query_stack[:self.cfg.query_size]

    def model(self, kind):
        if kind not in self._models:
            self._models[kind] = make_model(kind, self.cfg.system)
        return self._models[kind]

    def noise_at(self, snr_db):
        return self.cfg.system.noise_power_at(snr_db)

    @property
    def train_noise(self):
        return self.cfg.system.noise_power


def _save_params(params, ck_dir, name):
    if ck_dir is not None:
        params.save(os.path.join(ck_dir, name + ".params"))


def _log_path(log_dir, name):
    return None if log_dir is None else os.path.join(log_dir, name + ".csv")


# -- WMMSE reference --------------------------------------------------------------

def wmmse_reference_rows(ws: Workspace):
    """Converged WMMSE rate on every task's query set across the SNR grid."""
    cfg = ws.cfg
    table = ResultTable()
    for data in ws.all_data:
        tid = data.task.task_id
        for snr in cfg.snr_eval_grid:
            res = wmmse_solve(ws.eval_queries(data), ws.noise_at(snr),
                              cfg.system.total_power)
            table.add(method=METHOD_WMMSE, regime=REGIME_PER_TASK,
                      train_task=tid, test_task=tid, snr_db=float(snr),
                      sum_rate_bits_s_hz=float(np.mean(res.rate)),
                      iterations_used=int(np.max(res.iters)),
                      seed=derive_seed(cfg.seed, _ROLE_DATA, _METHOD_TAG[METHOD_WMMSE]))
    return table


# -- per-task training (transfer table) -------------------------------------------

def per_task_transfer_rows(ws: Workspace, methods=None, ck_dir=None, log_dir=None):
    """Train each method on one task at a time; zero-shot rate on the test query.

    Training tasks are ordered by decreasing similarity to the test task,
    so scanning train1..trainN exposes how transfer degrades with task
    distance.  Within one replicate every task cell shares the same training
    seed and the same dataset draws (see Workspace), so the scan down the
    task list is a paired comparison.  Methods listed in PER_TASK_REPLICATES
    emit one row per replicate; consumers average rows per cell.
    """
    cfg = ws.cfg
    methods = cfg.learned_methods() if methods is None else list(methods)
    table = ResultTable()
    test_q = ws.test_data.query_stack
    snr = float(cfg.system.snr_db)
    for method in methods:
        model = ws.model(method)
        for r in range(PER_TASK_REPLICATES.get(method, 1)):
            seed = derive_seed(cfg.seed, _ROLE_PER_TASK, _METHOD_TAG[method], r)
            opts = TrainOptions(learning_rate=cfg.train_lr,
                                iterations=cfg.train_iterations,
                                batch_size=cfg.batch_size, seed=seed)
            for data in ws.train_replicate(r):
                tid = data.task.task_id
                name = f"pertask_{method}_{tid}" + (f"_r{r}" if r else "")
                params = joint_train(model, [data], opts,
                                     log_path=_log_path(log_dir, name))
                _save_params(params, ck_dir, name)
                rate = evaluate_rate(model, params, test_q, ws.train_noise)
                table.add(method=method, regime=REGIME_PER_TASK, train_task=tid,
                          test_task=ws.test_task.task_id, snr_db=snr,
                          sum_rate_bits_s_hz=rate,
                          iterations_used=cfg.train_iterations, seed=seed)
    return table


def reproduce_table1(cfg: ExperimentConfig):
    """Cross-task zero-shot transfer matrix at the training SNR."""
    if REGIME_PER_TASK not in cfg.regimes:
        raise ValueError(f"transfer table needs regime {REGIME_PER_TASK!r} in the config")
    if not cfg.learned_methods():
        raise ValueError("transfer table needs at least one learned method")
    ws = Workspace(cfg)
    return per_task_transfer_rows(ws).sort()


# -- adaptation curves ------------------------------------------------------------

def _train_initializations(ws: Workspace, methods, regimes, ck_dir=None, log_dir=None):
    """Train the shared starting points the adaptation regimes fine-tune from."""
    cfg = ws.cfg
    inits = {}
    for method in methods:
        model = ws.model(method)
        if REGIME_JOINT in regimes:
            seed = derive_seed(cfg.seed, _ROLE_JOINT, _METHOD_TAG[method])
            opts = TrainOptions(learning_rate=cfg.train_lr,
                                iterations=cfg.train_iterations,
                                batch_size=cfg.batch_size, seed=seed)
            params = joint_train(model, ws.train_data, opts,
                                 log_path=_log_path(log_dir, f"joint_{method}"))
            _save_params(params, ck_dir, f"joint_{method}")
            inits[(method, REGIME_JOINT)] = (params, seed)
        if REGIME_MAML in regimes:
            seed = derive_seed(cfg.seed, _ROLE_MAML, _METHOD_TAG[method])
            opts = TrainOptions(learning_rate=cfg.train_lr,
                                iterations=cfg.meta_iterations,
                                batch_size=cfg.batch_size, seed=seed)
            params = maml_train(model, ws.train_data, cfg.inner_steps, cfg.inner_lr,
                                opts, log_path=_log_path(log_dir, f"maml_{method}"))
            _save_params(params, ck_dir, f"maml_{method}")
            inits[(method, REGIME_MAML)] = (params, seed)
        if REGIME_MULTITASK in regimes:
            seed = derive_seed(cfg.seed, _ROLE_MULTITASK, _METHOD_TAG[method])
            opts = TrainOptions(learning_rate=cfg.train_lr,
                                iterations=cfg.train_iterations,
                                batch_size=cfg.batch_size, seed=seed)
            mt = multitask_train(model, ws.train_data, opts,
                                 log_path=_log_path(log_dir, f"multitask_{method}"))
            if ck_dir is not None:
                _save_params(mt.shared, ck_dir, f"multitask_{method}_shared")
                for i, head in enumerate(mt.task_specific):
                    _save_params(head, ck_dir, f"multitask_{method}_head{i}")
            inits[(method, REGIME_MULTITASK)] = (mt, seed)
    return inits


def _mean_head_params(model, mt):
    """Merged full store with the head averaged across tasks (fresh-task start)."""
    head = ParamStore()
    for name in mt.task_specific[0].names():
        stacked = np.stack([h.get(name) for h in mt.task_specific])
        head.add(name, stacked.mean(axis=0), mt.task_specific[0].partition(name))
    return merge_params(mt.canonical_names, mt.shared, head)


def adaptation_curve_rows(ws: Workspace, method, regime, init, seed):
    """16-shot fine-tune on the test task, query rate per iteration per SNR.

    The rate at the training SNR comes straight from the adaptation report;
    the other grid points are evaluated through an on_iteration hook so the
    whole grid sees the exact same parameter trajectory.  Before returning,
    the report's first entry is cross-checked against an independent
    zero-shot evaluation of the starting parameters.
    """
    cfg = ws.cfg
    model = ws.model(method)
    support = ws.test_data.support_stack
    query = ws.test_data.query_stack
    noise_train = ws.train_noise
    snr_train = float(cfg.system.snr_db)
    off_grid = [float(s) for s in cfg.snr_eval_grid if float(s) != snr_train]

    caches = {s: FpnStateCache(model, model.total_power) for s in off_grid} \
        if model.kind == "fpn" else {}
    off_rates = {s: [] for s in off_grid}

    def eval_grid(t, params):
        for s in off_grid:
            off_rates[s].append(evaluate_rate(model, params, query, ws.noise_at(s),
                                              fpn_cache=caches.get(s), cache_key="q"))

    opts = TrainOptions(learning_rate=cfg.adapt_lr, iterations=cfg.curve_iterations,
                        batch_size=cfg.support_size, optimizer="sgd", seed=seed)
    if regime == REGIME_MULTITASK:
        zero_params = _mean_head_params(model, init)
        _, report = adapt_multitask(model, init, support, query, opts,
                                    noise=noise_train, on_iteration=eval_grid)
    else:
        zero_params = init
        _, report = fine_tune(model, init, support, query, opts,
                              noise=noise_train, on_iteration=eval_grid)

    zero_shot = evaluate_rate(model, zero_params, query, noise_train)
    drift = abs(zero_shot - report.rate_per_iteration[0])
    if drift > ZERO_SHOT_TOL:
        raise RuntimeError(
            f"curve start diverged from the zero-shot rate for {method}/{regime}: "
            f"|{zero_shot} - {report.rate_per_iteration[0]}| = {drift}")

    table = ResultTable()
    tid = ws.test_task.task_id
    if snr_train in cfg.snr_eval_grid:
        for t, rate in enumerate(report.rate_per_iteration):
            table.add(method=method, regime=regime, train_task="all", test_task=tid,
                      snr_db=snr_train, sum_rate_bits_s_hz=rate,
                      iterations_used=t, seed=seed)
    for s in off_grid:
        for t, rate in enumerate(off_rates[s]):
            table.add(method=method, regime=regime, train_task="all", test_task=tid,
                      snr_db=s, sum_rate_bits_s_hz=rate,
                      iterations_used=t, seed=seed)
    return table


def upperbound_rows(ws: Workspace, ck_dir=None, log_dir=None):
    """Unfolded model trained on abundant testing-task data; no adaptation gap."""
    cfg = ws.cfg
    model = ws.model("unfolded")
    seed = derive_seed(cfg.seed, _ROLE_UPPERBOUND, _METHOD_TAG["unfolded"])
    opts = TrainOptions(learning_rate=cfg.train_lr, iterations=cfg.train_iterations,
                        batch_size=cfg.batch_size, seed=seed)
    params = joint_train(model, [ws.test_data], opts,
                         log_path=_log_path(log_dir, "upperbound_unfolded"))
    _save_params(params, ck_dir, "upperbound_unfolded")
    table = ResultTable()
    tid = ws.test_task.task_id
    for snr in cfg.snr_eval_grid:
        rate = evaluate_rate(model, params, ws.test_data.query_stack, ws.noise_at(snr))
        table.add(method="unfolded", regime=REGIME_UPPERBOUND, train_task=tid,
                  test_task=tid, snr_db=float(snr), sum_rate_bits_s_hz=rate,
                  iterations_used=cfg.train_iterations, seed=seed)
    return table


def _regime_slug(regime):
    return regime.replace("+", "-")


def adaptation_rows(ws: Workspace, ck_dir=None, log_dir=None, write_dir=None,
                    include_upperbound=True):
    """All requested adaptation regimes plus the trained-on-test reference."""
    cfg = ws.cfg
    regimes = [r for r in cfg.regimes if r in ADAPT_REGIMES]
    methods = cfg.learned_methods()
    inits = _train_initializations(ws, methods, regimes, ck_dir=ck_dir, log_dir=log_dir)
    table = ResultTable()
    for method in methods:
        for regime in regimes:
            init, seed = inits[(method, regime)]
            rows = adaptation_curve_rows(ws, method, regime, init, seed)
            table.extend(rows)
            if write_dir is not None:
                path = os.path.join(write_dir,
                                    f"adaptation_{method}_{_regime_slug(regime)}.csv")
                with open(path, "w") as fh:
                    fh.write(rows.sort().to_csv())
    if include_upperbound and "unfolded" in methods and regimes:
        rows = upperbound_rows(ws, ck_dir=ck_dir, log_dir=log_dir)
        table.extend(rows)
        if write_dir is not None:
            path = os.path.join(write_dir, "adaptation_unfolded_upperbound.csv")
            with open(path, "w") as fh:
                fh.write(rows.sort().to_csv())
    return table


def reproduce_adaptation_curves(cfg: ExperimentConfig, write_csv=True):
    """Few-shot adaptation efficiency on the held-out task, per method and regime."""
    missing = {REGIME_JOINT, REGIME_MAML} - set(cfg.regimes)
    if missing:
        raise ValueError(f"adaptation curves need regimes {sorted(missing)} in the config")
    if not cfg.learned_methods():
        raise ValueError("adaptation curves need at least one learned method")
    write_dir = None
    if write_csv:
        os.makedirs(cfg.output_dir, exist_ok=True)
        write_dir = cfg.output_dir
    ws = Workspace(cfg)
    return adaptation_rows(ws, write_dir=write_dir).sort()


# -- full experiment --------------------------------------------------------------

@dataclass
class ExperimentResult:
    table: ResultTable
    output_dir: str
    paths: dict
    wall_times: dict


def _work_matrix(cfg: ExperimentConfig):
    """(method, regime) cells that produce rows; empty means the request is vacuous."""
    cells = set()
    for m in cfg.methods:
        for r in cfg.regimes:
            if m == METHOD_WMMSE and r == REGIME_PER_TASK:
                cells.add((m, r))
            elif m in LEARNED_METHODS:
                cells.add((m, r))
    return cells


def _probe_output_dir(path):
    """Fail fast, before any training, if results cannot be written."""
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_probe")
        with open(probe, "w") as fh:
            fh.write("ok")
        os.remove(probe)
    except OSError as exc:
        raise ValueError(f"output_dir {path!r} is not writable: {exc}") from exc


def _param_count_lines(ws: Workspace, methods):
    lines = ["| model | parameters |", "| --- | --- |"]
    for m in methods:
        model = ws.model(m)
        n = model.init_params(np.random.default_rng(0)).num_scalars()
        lines.append(f"| {m} | {n} |")
    return lines


def _summary_markdown(cfg, ws, table, wall_times):
    snr = float(cfg.system.snr_db)
    out = ["# Experiment summary", "",
           f"- methods: {', '.join(cfg.methods)}",
           f"- regimes: {', '.join(cfg.regimes)}",
           f"- snr grid (dB): {', '.join(str(s) for s in cfg.snr_eval_grid)}",
           f"- seed: {cfg.seed}",
           f"- training iterations: {cfg.train_iterations} "
           f"(meta {cfg.meta_iterations}, inner steps {cfg.inner_steps})",
           f"- fine-tune budgets: " + ", ".join(
               f"{m}={cfg.budget_for(m, REGIME_JOINT)}" for m in cfg.learned_methods())
           + f", maml={cfg.maml_budget}", ""]
    learned = cfg.learned_methods()
    if learned:
        out += ["## Model sizes", ""] + _param_count_lines(ws, learned) + [""]

    transfer = table.filtered(regime=REGIME_PER_TASK)
    learned_transfer = [r for r in transfer.rows if r.method != METHOD_WMMSE]
    if learned_transfer:
        tasks = [d.task.task_id for d in ws.train_data]
        out += [f"## Zero-shot transfer to the test task ({snr:g} dB)", "",
                "| method | " + " | ".join(tasks) + " |",
                "| --- |" + " --- |" * len(tasks)]
        for m in learned:
            cells = []
            for t in tasks:
                rows = [r for r in learned_transfer if r.method == m and r.train_task == t]
                if rows:
                    cells.append(f"{np.mean([r.sum_rate_bits_s_hz for r in rows]):.3f}")
                else:
                    cells.append("-")
            out.append(f"| {m} | " + " | ".join(cells) + " |")
        out.append("")

    wrows = table.filtered(method=METHOD_WMMSE).rows
    if wrows:
        tasks = sorted({r.train_task for r in wrows})
        snrs = sorted({r.snr_db for r in wrows})
        out += ["## WMMSE reference (bits/s/Hz)", "",
                "| task | " + " | ".join(f"{s:g} dB" for s in snrs) + " |",
                "| --- |" + " --- |" * len(snrs)]
        for t in tasks:
            cells = [f"{r.sum_rate_bits_s_hz:.3f}"
                     for s in snrs for r in wrows
                     if r.train_task == t and r.snr_db == s]
            out.append(f"| {t} | " + " | ".join(cells) + " |")
        out.append("")

    adapt_regimes = [r for r in cfg.regimes if r in ADAPT_REGIMES]
    if adapt_regimes and learned and snr in cfg.snr_eval_grid:
        out += [f"## Adaptation on the test task ({snr:g} dB, 16-shot)", "",
                "| method | regime | zero-shot | at budget | at "
                f"{cfg.curve_iterations} |", "| --- | --- | --- | --- | --- |"]
        for m in learned:
            for reg in adapt_regimes:
                curve = table.curve(m, reg, snr)
                if not curve:
                    continue
                b = min(cfg.budget_for(m, reg), len(curve) - 1)
                out.append(f"| {m} | {reg} | {curve[0]:.3f} | {curve[b]:.3f} "
                           f"({b} it) | {curve[-1]:.3f} |")
        ub = table.filtered(regime=REGIME_UPPERBOUND, snr_db=snr).rows
        if ub:
            out.append(f"| unfolded | {REGIME_UPPERBOUND} | - | - | "
                       f"{ub[0].sum_rate_bits_s_hz:.3f} |")
        out.append("")

    out += ["## Wall clock", "", "| phase | seconds |", "| --- | --- |"]
    for name, sec in wall_times.items():
        out.append(f"| {name} | {sec:.1f} |")
    out += ["", f"total: {sum(wall_times.values()):.1f} s", ""]
    return "\n".join(out)


def run_experiment(cfg: ExperimentConfig):
    """Execute the requested methods x regimes matrix and write all artifacts.

    Reruns with an identical config produce a byte-identical results.csv;
    wall-clock timings go to summary.md only.
    """
    cells = _work_matrix(cfg)
    if not cells:
        raise ValueError("requested methods x regimes matrix is empty; "
                         f"wmmse only runs under {REGIME_PER_TASK!r}")
    _probe_output_dir(cfg.output_dir)
    ck_dir = os.path.join(cfg.output_dir, "checkpoints")
    log_dir = os.path.join(cfg.output_dir, "logs")
    os.makedirs(ck_dir, exist_ok=True)
    os.makedirs(log_dir, exist_ok=True)

    ws = Workspace(cfg)
    table = ResultTable()
    wall = {}

    def timed(name, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        wall[name] = time.perf_counter() - t0
        return out

    with open(os.path.join(cfg.output_dir, "suite.json"), "w") as fh:
        fh.write(suite_to_json(cfg.system, ws.train_tasks, ws.test_task, cfg.suite))

    if METHOD_WMMSE in cfg.methods and REGIME_PER_TASK in cfg.regimes:
        table.extend(timed("wmmse reference", wmmse_reference_rows, ws))
    if cfg.learned_methods() and REGIME_PER_TASK in cfg.regimes:
        table.extend(timed("per-task training", per_task_transfer_rows, ws,
                           ck_dir=ck_dir, log_dir=log_dir))
    if cfg.learned_methods() and any(r in ADAPT_REGIMES for r in cfg.regimes):
        table.extend(timed("adaptation", adaptation_rows, ws,
                           ck_dir=ck_dir, log_dir=log_dir, write_dir=cfg.output_dir))

    table.sort()
    paths = {"results_csv": os.path.join(cfg.output_dir, "results.csv"),
             "results_json": os.path.join(cfg.output_dir, "results.json"),
             "summary": os.path.join(cfg.output_dir, "summary.md"),
             "checkpoints": ck_dir, "logs": log_dir}
    with open(paths["results_csv"], "w") as fh:
        fh.write(table.to_csv())
    doc = {"config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
           "rows": table.to_dicts()}
    with open(paths["results_json"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(paths["summary"], "w") as fh:
        fh.write(_summary_markdown(cfg, ws, table, wall))
    return ExperimentResult(table=table, output_dir=cfg.output_dir,
                            paths=paths, wall_times=wall)
