"""Command line front end: suite generation, training, adaptation, full reports.

Every subcommand accepts the same configuration surface: --config points at a
JSON file mirroring ExperimentConfig field-for-field, and the remaining flags
override individual fields on top of it.  Artifacts land under --out.
"""

import json
import os

import click

from .bench import (ExperimentConfig, Workspace, ResultTable, ALL_METHODS,
                    ALL_REGIMES, ADAPT_REGIMES, REGIME_MULTITASK,
                    adaptation_curve_rows, reproduce_adaptation_curves,
                    reproduce_table1, run_experiment,
                    _train_initializations, _regime_slug)
from .channel import suite_to_json
from .precoders import ParamStore
from .training import MultiTaskParams


def _build_config(config, seed, out, methods, regimes, snr):
    cfg = ExperimentConfig() if config is None else \
        ExperimentConfig.from_json(open(config).read())
    kw = {}
    if seed is not None:
        kw["seed"] = seed
    if out is not None:
        kw["output_dir"] = out
    if methods:
        kw["methods"] = tuple(m.strip() for m in methods.split(","))
    if regimes:
        kw["regimes"] = tuple(r.strip() for r in regimes.split(","))
    if snr:
        kw["snr_eval_grid"] = tuple(float(s) for s in snr.split(","))
    if not kw:
        return cfg
    d = cfg.to_dict()
    d.update({k: (v if not isinstance(v, tuple) else list(v)) for k, v in kw.items()})
    return ExperimentConfig.from_dict(d)


def _common(fn):
    for deco in (
            click.option("--config", type=click.Path(exists=True, dir_okay=False),
                         default=None, help="JSON experiment config."),
            click.option("--seed", type=int, default=None, help="Top-level seed."),
            click.option("--out", type=click.Path(file_okay=False), default=None,
                         help="Output directory (overrides config output_dir)."),
            click.option("--methods", default=None,
                         help=f"Comma list from {','.join(ALL_METHODS)}."),
            click.option("--regimes", default=None,
                         help=f"Comma list from {','.join(ALL_REGIMES)}."),
            click.option("--snr", default=None,
                         help="Comma list of evaluation SNRs in dB.")):
        fn = deco(fn)
    return fn


def _echo_written(paths):
    for name, path in paths.items():
        click.echo(f"{name}: {path}")


@click.group()
def main():
    """Benchmark harness for fast-adapting MU-MIMO precoders."""


@main.command("gen-suite")
@_common
def gen_suite(config, seed, out, methods, regimes, snr):
    """Write the task suite (correlation grid plus seeds) as JSON."""
    cfg = _build_config(config, seed, out, methods, regimes, snr)
    ws = Workspace(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "suite.json")
    with open(path, "w") as fh:
        fh.write(suite_to_json(cfg.system, ws.train_tasks, ws.test_task, cfg.suite))
    click.echo(f"suite: {path}")


@main.command("train")
@_common
def train(config, seed, out, methods, regimes, snr):
    """Train the requested initializations and write checkpoints.

    Produces one checkpoint per (method, regime) under <out>/checkpoints plus
    a manifest the adapt subcommand consumes.  Per-task transfer training is
    covered by the table1 subcommand instead.
    """
    cfg = _build_config(config, seed, out, methods, regimes, snr)
    regimes_ = [r for r in cfg.regimes if r in ADAPT_REGIMES]
    if not regimes_ or not cfg.learned_methods():
        raise click.UsageError("train needs at least one learned method and one "
                               f"regime from {ADAPT_REGIMES}")
    ck_dir = os.path.join(cfg.output_dir, "checkpoints")
    log_dir = os.path.join(cfg.output_dir, "logs")
    os.makedirs(ck_dir, exist_ok=True)
    os.makedirs(log_dir, exist_ok=True)
    ws = Workspace(cfg)
    inits = _train_initializations(ws, cfg.learned_methods(), regimes_,
                                   ck_dir=ck_dir, log_dir=log_dir)
    manifest = {"config": cfg.to_dict(), "entries": []}
    for (method, regime), (init, seed_) in inits.items():
        entry = {"method": method, "regime": regime, "seed": seed_}
        if regime == REGIME_MULTITASK:
            entry["shared"] = f"multitask_{method}_shared.params"
            entry["heads"] = [f"multitask_{method}_head{i}.params"
                              for i in range(len(init.task_specific))]
            entry["canonical_names"] = init.canonical_names
        else:
            entry["params"] = f"{_regime_slug(regime).split('-')[0]}_{method}.params"
        manifest["entries"].append(entry)
    path = os.path.join(cfg.output_dir, "train_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    click.echo(f"checkpoints: {ck_dir}")
    click.echo(f"manifest: {path}")


@main.command("adapt")
@_common
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Manifest from the train subcommand "
              "(default <out>/train_manifest.json).")
def adapt(config, seed, out, methods, regimes, snr, manifest):
    """Few-shot adaptation on the testing task from trained checkpoints."""
    cfg = _build_config(config, seed, out, methods, regimes, snr)
    path = manifest or os.path.join(cfg.output_dir, "train_manifest.json")
    if not os.path.exists(path):
        raise click.UsageError(f"no manifest at {path}; run the train subcommand first")
    with open(path) as fh:
        doc = json.load(fh)
    saved = ExperimentConfig.from_dict(doc["config"])
    ws = Workspace(saved)
    ck_dir = os.path.join(saved.output_dir, "checkpoints")
    table = ResultTable()
    want_m = set(cfg.methods)
    want_r = set(cfg.regimes)
    for entry in doc["entries"]:
        method, regime = entry["method"], entry["regime"]
        if method not in want_m or regime not in want_r:
            continue
        if regime == REGIME_MULTITASK:
            init = MultiTaskParams(
                shared=ParamStore.load(os.path.join(ck_dir, entry["shared"])),
                task_specific=[ParamStore.load(os.path.join(ck_dir, h))
                               for h in entry["heads"]],
                canonical_names=list(entry["canonical_names"]))
        else:
            init = ParamStore.load(os.path.join(ck_dir, entry["params"]))
        rows = adaptation_curve_rows(ws, method, regime, init, int(entry["seed"]))
        table.extend(rows)
    if not table.rows:
        raise click.UsageError("manifest holds no entries matching the requested "
                               "methods and regimes")
    os.makedirs(cfg.output_dir, exist_ok=True)
    out_path = os.path.join(cfg.output_dir, "adaptation.csv")
    with open(out_path, "w") as fh:
        fh.write(table.sort().to_csv())
    click.echo(f"adaptation: {out_path}")


@main.command("table1")
@_common
def table1(config, seed, out, methods, regimes, snr):
    """Cross-task zero-shot transfer table (per-task training)."""
    cfg = _build_config(config, seed, out, methods, regimes, snr)
    table = reproduce_table1(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "table1.csv")
    with open(path, "w") as fh:
        fh.write(table.to_csv())
    click.echo(f"table1: {path}")


@main.command("curves")
@_common
def curves(config, seed, out, methods, regimes, snr):
    """Adaptation-efficiency curves on the testing task."""
    cfg = _build_config(config, seed, out, methods, regimes, snr)
    table = reproduce_adaptation_curves(cfg)
    path = os.path.join(cfg.output_dir, "curves.csv")
    with open(path, "w") as fh:
        fh.write(table.to_csv())
    click.echo(f"curves: {path}")


@main.command("report")
@_common
def report(config, seed, out, methods, regimes, snr):
    """Run the full methods x regimes matrix and write every artifact."""
    cfg = _build_config(config, seed, out, methods, regimes, snr)
    result = run_experiment(cfg)
    _echo_written(result.paths)


if __name__ == "__main__":
    main()
