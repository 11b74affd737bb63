"""Representation similarity, accuracy summaries and memory accounting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

__all__ = [
    "linear_cka", "CkaReport", "cka_report", "RunMetrics", "compute_metrics",
    "MemoryBudget", "memory_budget", "write_cka", "read_cka", "write_metrics",
    "read_metrics", "write_attention_mass", "atomic_write_text",
]


def linear_cka(X, Y) -> float:
    """Linear centered kernel alignment between two (n, p) and (n, q) feature sets."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ValueError(f"need (n, p) and (n, q) arrays, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    norm_x = np.linalg.norm(X.T @ X)
    norm_y = np.linalg.norm(Y.T @ Y)
    if norm_x == 0 or norm_y == 0:
        raise ValueError("CKA is undefined for zero-variance features")
    return float(np.linalg.norm(Y.T @ X) ** 2 / (norm_x * norm_y))


@dataclass
class CkaReport:
    matrix: np.ndarray

    @property
    def mean_off_diagonal(self) -> float:
        n = self.matrix.shape[0]
        if n < 2:
            return float("nan")
        mask = ~np.eye(n, dtype=bool)
        return float(self.matrix[mask].mean())


@torch.no_grad()
def _pooled(extractor, probe: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    was_training = extractor.training
    extractor.eval()
    try:
        chunks = [extractor(probe[i:i + batch_size])["features"]
                  for i in range(0, len(probe), batch_size)]
    finally:
        extractor.train(was_training)
    return torch.cat(chunks).double().numpy()


def cka_report(extractors: Sequence, probe: torch.Tensor) -> CkaReport:
    """Pairwise linear CKA of the pooled features of each extractor on ``probe``."""
    if len(extractors) < 2:
        raise ValueError("need at least two extractors to compare")
    feats = [_pooled(e, probe) for e in extractors]
    n = len(feats)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            matrix[i, j] = matrix[j, i] = linear_cka(feats[i], feats[j])
    return CkaReport(matrix)


@dataclass
class RunMetrics:
    accuracies: List[float]
    param_counts: List[int] = field(default_factory=list)

    @property
    def last(self) -> float:
        return self.accuracies[-1]

    @property
    def avg(self) -> float:
        return float(sum(self.accuracies) / len(self.accuracies))

    def to_dict(self):
        return {"accuracies": list(self.accuracies), "avg": self.avg, "last": self.last,
                "param_counts": list(self.param_counts)}


def compute_metrics(per_stage_accuracies: Sequence[float],
                    param_counts: Sequence[int] = ()) -> RunMetrics:
    acc = [float(a) for a in per_stage_accuracies]
    if not acc:
        raise ValueError("no stages to summarise")
    return RunMetrics(acc, [int(p) for p in param_counts])


@dataclass
class MemoryBudget:
    exemplar_count: int
    extra_models: int
    model_bytes: int
    exemplars_per_model: float
    total_bytes: int
    total_exemplar_equivalents: float


def memory_budget(model_param_count: int, exemplar_count: int, bytes_per_exemplar: int,
                  extra_models: int = 1, bytes_per_param: int = 4) -> MemoryBudget:
    """Express the cost of ``extra_models`` saved models in stored-exemplar units.

    A memory-aligned baseline gets ``total_exemplar_equivalents`` exemplars.
    """
    if model_param_count <= 0 or bytes_per_exemplar <= 0 or bytes_per_param <= 0:
        raise ValueError("parameter count and byte sizes must be positive")
    if exemplar_count < 0 or extra_models < 0:
        raise ValueError("counts must be non-negative")
    model_bytes = model_param_count * bytes_per_param
    per_model = model_bytes / bytes_per_exemplar
    return MemoryBudget(
        exemplar_count=exemplar_count,
        extra_models=extra_models,
        model_bytes=model_bytes,
        exemplars_per_model=per_model,
        total_bytes=exemplar_count * bytes_per_exemplar + extra_models * model_bytes,
        total_exemplar_equivalents=exemplar_count + extra_models * per_model,
    )


# --------------------------------------------------------------------------- files

def atomic_write_text(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cka(report: CkaReport, directory, task: int) -> Path:
    path = Path(directory) / f"cka_t{task}.csv"
    rows = [",".join(_fmt(v) for v in row) for row in report.matrix]
    atomic_write_text(path, "\n".join(rows) + "\n")
    return path


def read_cka(path) -> CkaReport:
    return CkaReport(np.loadtxt(path, delimiter=",", ndmin=2))


def write_metrics(metrics: RunMetrics, directory, extra: Optional[dict] = None) -> Path:
    path = Path(directory) / "metrics.json"
    payload = metrics.to_dict()
    if extra:
        payload.update(extra)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text())


def write_attention_mass(rows, directory) -> Path:
    """``rows`` of (task, epoch, ta_mass)."""
    path = Path(directory) / "attention_mass.csv"
    lines = ["task,epoch,ta_mass"] + [f"{t},{e},{_fmt(m)}" for t, e, m in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[f"{c:.4f}" if isinstance(c, float) else str(c)
                                         for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)

