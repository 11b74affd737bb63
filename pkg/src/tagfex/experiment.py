"""End-to-end runs: data, per-task training, checkpoints and emitted artifacts.

A run directory holds::

    config.yaml  run.json  metrics.json  attention_mass.csv
    cka_t{t}.csv              one per task with at least two extractors
    attention/attn_t{t}_e{e}.txt
    checkpoints/task_{t}.pt   written after every task; resume picks the latest
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._validation import to_nchw
from .analysis import (CkaReport, atomic_write_text, cka_report, compute_metrics,
                       format_table, write_attention_mass, write_cka, write_metrics)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ConfigError, ExperimentConfig, ablation_matrix, config_hash,
                     default_output_dir, dump_config, load_config)
from .datastream import TaskDataset, generate_collision_dataset, load_dataset_dir, make_splits
from .estimator import component_seed
from .merge_attention import save_attention_record
from .pruning import prune_extractor, save_plan

logger = logging.getLogger(__name__)

__all__ = ["ConfigMismatchError", "RunResult", "load_task_data", "evaluate", "run",
           "analyze", "prune_run", "ablate"]

_CKPT = re.compile(r"task_(\d+)\.pt$")


class ConfigMismatchError(RuntimeError):
    """A run directory was produced by a different configuration."""


@dataclass
class RunResult:
    out_dir: Path
    accuracies: List[float]
    per_task: List[List[float]]
    estimator: object

    @property
    def last(self) -> float:
        return self.accuracies[-1]


# --------------------------------------------------------------------------- data

def load_task_data(config: ExperimentConfig) -> Tuple[List[TaskDataset], List[TaskDataset]]:
    """Train and test task lists for ``config.dataset``."""
    ds = config.dataset
    split = ds.split_spec()
    if ds.name == "collision":
        train_spec = ds.collision_spec(ds.train_per_class)
        k = train_spec.classes_per_task
        if ds.base_size != k or ds.increment_size != k or \
                ds.total_classes != k * train_spec.n_tasks:
            raise ConfigError("collision dataset needs base_size == increment_size == "
                              "classes_per_task and total_classes == classes * n_tasks")
        train = generate_collision_dataset(
            train_spec, component_seed(ds.data_seed, 0, "collision-train"))
        test = generate_collision_dataset(
            ds.collision_spec(ds.test_per_class),
            component_seed(ds.data_seed, 0, "collision-test"))
        return train, test
    meta, splits = load_dataset_dir(ds.path)
    if "train" not in splits or "test" not in splits:
        raise ConfigError(f"{ds.path} needs 'train' and 'test' splits")
    names = meta.get("class_names")
    train = make_splits(split, *splits["train"], class_names=names)
    test = make_splits(split, *splits["test"], class_names=names)
    return train, test


def _seen(tasks: Sequence[TaskDataset], upto: int):
    x = np.concatenate([t.images for t in tasks[:upto + 1]])
    y = np.concatenate([t.labels for t in tasks[:upto + 1]])
    return x, y


def evaluate(estimator, test: Sequence[TaskDataset], upto: int) -> Tuple[float, List[float]]:
    """Accuracy over every class seen up to task ``upto``, plus per-task accuracy."""
    x, y = _seen(test, upto)
    pred = estimator.predict(x)
    per_task = []
    for t in test[:upto + 1]:
        mask = np.isin(y, t.class_set)
        per_task.append(float(np.mean(pred[mask] == y[mask])))
    return float(np.mean(pred == y)), per_task


def _cka_probe(config: ExperimentConfig, test, upto: int, dtype):
    x, _ = _seen(test, upto)
    n = config.analysis.cka_probe_size
    if len(x) > n:
        rng = np.random.default_rng(component_seed(config.dataset.data_seed, upto, "cka"))
        x = x[np.sort(rng.choice(len(x), n, replace=False))]
    return to_nchw(x, dtype)


def _task_cka(config, estimator, test, upto) -> Optional[CkaReport]:
    extractors = list(estimator.model_set_.extractors)
    if len(extractors) < 2:
        return None
    return cka_report(extractors, _cka_probe(config, test, upto, estimator._torch_dtype))


# --------------------------------------------------------------------------- run dirs

def _checkpoints(out_dir: Path) -> List[Tuple[int, Path]]:
    found = []
    for p in (out_dir / "checkpoints").glob("task_*.pt"):
        m = _CKPT.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def _claim_dir(out_dir: Path, config: ExperimentConfig) -> str:
    """Create or verify ``run.json``; refuse a directory owned by another config."""
    digest = config_hash(config)
    run_json = out_dir / "run.json"
    if run_json.exists():
        stored = json.loads(run_json.read_text()).get("config_hash")
        if stored != digest:
            raise ConfigMismatchError(
                f"{out_dir} holds a run of config {stored}, not {digest}")
        return digest
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "config.yaml", dump_config(config))
    atomic_write_text(run_json, json.dumps({"config_hash": digest, "name": config.name,
                                            "seed": config.seed}, indent=2) + "\n")
    return digest


def _emit_final(out_dir: Path, config, estimator, accuracies, per_task, digest):
    extra = {"per_task": per_task, "config_hash": digest,
             "estimator": type(estimator).__name__, "n_tasks": len(accuracies)}
    cka_path = out_dir / f"cka_t{len(accuracies) - 1}.csv"
    if cka_path.exists():
        matrix = np.loadtxt(cka_path, delimiter=",", ndmin=2)
        extra["cka_mean_off_diagonal"] = CkaReport(matrix).mean_off_diagonal
    records = estimator.attention_records_
    if records:
        att_dir = out_dir / "attention"
        att_dir.mkdir(exist_ok=True)
        for rec in records:
            save_attention_record(rec, att_dir)
        write_attention_mass([(r.task, r.epoch, r.ta_mass()) for r in records], out_dir)
    write_metrics(compute_metrics(accuracies, estimator.param_counts_), out_dir, extra)


def run(config: ExperimentConfig, out_dir=None, *, resume: bool = True,
        stop_after: Optional[int] = None) -> RunResult:
    """Train over every task of ``config`` and write the run directory.

    With ``resume`` the latest per-task checkpoint in ``out_dir`` is picked up;
    ``stop_after`` ends the process after that many tasks have been completed
    (used to exercise resumption).
    """
    out_dir = Path(out_dir) if out_dir is not None else default_output_dir(config)
    digest = _claim_dir(out_dir, config)
    train, test = load_task_data(config)

    estimator, accuracies, per_task, start = None, [], [], 0
    ckpts = _checkpoints(out_dir) if resume else []
    if ckpts:
        task, path = ckpts[-1]
        estimator, extra = load_checkpoint(path)
        if extra.get("config_hash") != digest:
            raise ConfigMismatchError(f"{path} was written by another config")
        accuracies = list(extra["accuracies"])
        per_task = [list(r) for r in extra["per_task"]]
        start = task + 1
        logger.info("resuming %s after task %d", out_dir, task)
    if estimator is None:
        estimator = config.build_estimator()

    for t in range(start, len(train)):
        estimator.partial_fit(train[t].images, train[t].labels)
        acc, row = evaluate(estimator, test, t)
        accuracies.append(acc)
        per_task.append(row)
        logger.info("task %d: accuracy %.4f", t, acc)
        report = _task_cka(config, estimator, test, t)
        if report is not None:
            write_cka(report, out_dir, t)
        save_checkpoint(estimator, out_dir / "checkpoints" / f"task_{t}.pt",
                        extra={"config_hash": digest, "accuracies": accuracies,
                               "per_task": per_task})
        if stop_after is not None and t + 1 >= stop_after and t + 1 < len(train):
            return RunResult(out_dir, accuracies, per_task, estimator)

    _emit_final(out_dir, config, estimator, accuracies, per_task, digest)
    return RunResult(out_dir, accuracies, per_task, estimator)


def _load_run(run_dir) -> Tuple[Path, ExperimentConfig, str]:
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.yaml")
    digest = _claim_dir(run_dir, config)
    return run_dir, config, digest


def analyze(run_dir) -> dict:
    """Recompute accuracies and CKA reports from the checkpoints of ``run_dir``."""
    run_dir, config, digest = _load_run(run_dir)
    ckpts = _checkpoints(run_dir)
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir / 'checkpoints'}")
    _, test = load_task_data(config)
    accuracies, per_task, estimator = [], [], None
    for t, path in ckpts:
        estimator, _ = load_checkpoint(path)
        acc, row = evaluate(estimator, test, t)
        accuracies.append(acc)
        per_task.append(row)
        report = _task_cka(config, estimator, test, t)
        if report is not None:
            write_cka(report, run_dir, t)
    _emit_final(run_dir, config, estimator, accuracies, per_task, digest)
    return json.loads((run_dir / "metrics.json").read_text())


def prune_run(run_dir, rate: float, mode: str = "fpgm") -> dict:
    """Prune every extractor of the final checkpoint to ``rate`` and re-evaluate."""
    run_dir, config, _ = _load_run(run_dir)
    ckpts = _checkpoints(run_dir)
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir / 'checkpoints'}")
    task, path = ckpts[-1]
    estimator, _ = load_checkpoint(path)
    _, test = load_task_data(config)
    acc_before, _ = evaluate(estimator, test, task)
    params_before = estimator.inference_param_count()

    out = run_dir / f"pruned_r{rate:g}"
    out.mkdir(exist_ok=True)
    rates = []
    # training is over: the auxiliary head is not used for prediction
    estimator.model_set_.aux_classifier = None
    for i, extractor in enumerate(list(estimator.model_set_.extractors)):
        pruned, keep, plan = prune_extractor(extractor, rate, mode)
        estimator.model_set_.replace_extractor(i, pruned, keep)
        save_plan(plan, out / f"plan_extractor{i}.json")
        rates.append(plan.achieved_rate)
    acc_after, per_task = evaluate(estimator, test, task)
    summary = {"target_rate": rate, "mode": mode, "achieved_rates": rates,
               "accuracy_before": acc_before, "accuracy_after": acc_after,
               "per_task_after": per_task, "params_before": params_before,
               "params_after": estimator.inference_param_count()}
    atomic_write_text(out / "prune.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    save_checkpoint(estimator, out / "model.pt", extra={"source": str(path)})
    return summary


def ablate(config: ExperimentConfig, out_root=None) -> List[dict]:
    """Run the ablation grid of ``config``; writes ``ablation.csv`` in ``out_root``."""
    out_root = Path(out_root) if out_root is not None else default_output_dir(config)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, cfg in ablation_matrix(config):
        result = run(cfg, out_root / name)
        metrics = json.loads((result.out_dir / "metrics.json").read_text())
        rows.append({"name": name, "avg": metrics["avg"], "last": metrics["last"],
                     "cka": metrics.get("cka_mean_off_diagonal", float("nan"))})
    lines = ["name,avg,last,cka"] + [f"{r['name']},{r['avg']!r},{r['last']!r},{r['cka']!r}"
                                     for r in rows]
    atomic_write_text(out_root / "ablation.csv", "\n".join(lines) + "\n")
    logger.info("\n%s", format_table(["config", "avg", "last", "cka"],
                                     [[r["name"], r["avg"], r["last"], r["cka"]] for r in rows]))
    return rows
