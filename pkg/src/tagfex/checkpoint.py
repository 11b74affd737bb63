"""Versioned, atomically written estimator checkpoints."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .datastream import RehearsalMemory
from .merge_attention import AttentionRecord, MergeAttention
from .model_core import (AuxiliaryClassifier, BackboneSpec, ExpandableClassifier, MLPHead,
                         build_backbone, freeze)
from .pruning import PruningPlan
from .task_agnostic import TaskAgnosticModel, TaskAgnosticState

FORMAT = "tagfex-checkpoint"
VERSION = 1

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]


class CheckpointError(RuntimeError):
    pass


def _prefixed(prefix, module):
    return {f"{prefix}.{k}": v.detach().clone() for k, v in module.state_dict().items()}


def _spec_dict(module) -> dict:
    return module.spec.to_dict()


def save_checkpoint(estimator, path, extra: Optional[dict] = None) -> Path:
    """Write the fitted state of ``estimator`` to ``path`` (temp file, then rename)."""
    est = estimator
    ms = est.model_set_
    tensors = {}
    for i, e in enumerate(ms.extractors):
        tensors.update(_prefixed(f"ts.{i}", e))
    tensors.update(_prefixed("cls", ms.classifier))
    if ms.aux_classifier is not None:
        tensors.update(_prefixed("aux", ms.aux_classifier))

    arch = {
        "ts_extractors": [_spec_dict(e) for e in ms.extractors],
        "task_sizes": list(ms.task_sizes),
        "classifier": list(ms.classifier.weight.shape),
        "classifier_splits": [list(ms.classifier.class_splits), list(ms.classifier.splits)],
        "aux": list(ms.aux_classifier.weight.shape) if ms.aux_classifier is not None else None,
        "ta": None, "merge": None,
    }
    ta = est.ta_state_
    if ta is not None:
        tensors.update(_prefixed("ta.model", ta.model))
        if ta.previous is not None:
            tensors.update(_prefixed("ta.previous", ta.previous))
        if ta.predictor is not None:
            tensors.update(_prefixed("ta.predictor", ta.predictor))
        arch["ta"] = {"backbone": ta.model.backbone_spec.to_dict(), "proj_dim": ta.proj_dim,
                      "previous": ta.previous is not None,
                      "predictor": ta.predictor is not None}
    if est.merge_block_ is not None:
        tensors.update(_prefixed("merge", est.merge_block_))
        tensors.update(_prefixed("merge_cls", est.merge_classifier_))
        mb = est.merge_block_
        arch["merge"] = {"dim": mb.dim, "heads": mb.n_heads, "ta_dim": mb.ta_dim,
                         "classifier": list(est.merge_classifier_.weight.shape),
                         "classifier_splits": [list(est.merge_classifier_.class_splits),
                                               list(est.merge_classifier_.splits)]}

    mem = est.memory_
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "estimator": type(est).__name__,
        "params": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in est.get_params().items()},
        "architecture": arch,
        "tensors": tensors,
        "task_index": int(est.n_tasks_),
        "class_order": torch.from_numpy(np.asarray(est.classes_, dtype=np.int64)),
        "image_shape": list(est.image_shape_),
        "memory": {"capacity": mem.capacity, "quota": mem.per_class_quota,
                   "exemplars": {int(c): torch.from_numpy(np.ascontiguousarray(v))
                                 for c, v in mem.exemplars.items()}},
        "attention": [(r.task, r.epoch, torch.from_numpy(r.matrix)) for r in est.attention_records_],
        "history": [dict(h) for h in est.history_],
        "param_counts": list(est.param_counts_),
        "pruning_plans": [(i, {"removed": p.removed, "target_rate": p.target_rate,
                               "achieved_rate": p.achieved_rate, "mode": p.mode})
                          for i, p in est.pruning_plans_],
        "rng": {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def _load_prefixed(module, tensors, prefix):
    sub = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(sub, strict=True)


def load_checkpoint(path, estimator_cls=None) -> Tuple[object, dict]:
    """Rebuild an estimator from ``path``; returns ``(estimator, extra)``."""
    from .estimator import DERClassifier, TagFexClassifier

    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")

    if estimator_cls is None:
        classes = {c.__name__: c for c in (TagFexClassifier, DERClassifier)}
        estimator_cls = classes.get(payload.get("estimator"), TagFexClassifier)
    try:
        return _restore(payload, estimator_cls), payload["extra"]
    except (KeyError, RuntimeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc


def _restore(payload, estimator_cls):
    params = payload["params"]
    if "channels" in params:
        params["channels"] = tuple(params["channels"])
    est = estimator_cls(**params)
    est._init_state(tuple(payload["image_shape"]))
    dtype = est._torch_dtype
    arch = payload["architecture"]
    tensors = payload["tensors"]

    ms = est.model_set_
    n = len(arch["ts_extractors"])
    for i, spec in enumerate(arch["ts_extractors"]):
        e = build_backbone(BackboneSpec(**spec)).to(dtype)
        _load_prefixed(e, tensors, f"ts.{i}")
        if i < n - 1:
            freeze(e)
        ms.extractors.append(e)
    ms.task_sizes = list(arch["task_sizes"])
    n_cls, in_dim = arch["classifier"]
    ms.classifier = ExpandableClassifier(in_dim, n_cls, arch["classifier_splits"][1],
                                         arch["classifier_splits"][0]).to(dtype)
    _load_prefixed(ms.classifier, tensors, "cls")
    if arch["aux"] is not None:
        out, in_dim = arch["aux"]
        ms.aux_classifier = AuxiliaryClassifier(in_dim, out - 1).to(dtype)
        _load_prefixed(ms.aux_classifier, tensors, "aux")

    if arch["ta"] is not None:
        ta_arch = arch["ta"]
        spec = BackboneSpec(**ta_arch["backbone"])
        ta = TaskAgnosticState(spec, ta_arch["proj_dim"], est.temperature,
                               est.symmetric_infonce).to(dtype)
        _load_prefixed(ta.model, tensors, "ta.model")
        if ta_arch["previous"]:
            ta.previous = freeze(TaskAgnosticModel(spec, ta_arch["proj_dim"]).to(dtype))
            _load_prefixed(ta.previous, tensors, "ta.previous")
        if ta_arch["predictor"]:
            p = ta_arch["proj_dim"]
            ta.predictor = MLPHead(p, p, p).to(dtype)
            _load_prefixed(ta.predictor, tensors, "ta.predictor")
        est.ta_state_ = ta
    if arch["merge"] is not None:
        m = arch["merge"]
        est.merge_block_ = MergeAttention(m["dim"], m["heads"], m["ta_dim"]).to(dtype)
        _load_prefixed(est.merge_block_, tensors, "merge")
        n_cls, d = m["classifier"]
        est.merge_classifier_ = ExpandableClassifier(
            d, n_cls, m["classifier_splits"][1], m["classifier_splits"][0]).to(dtype)
        _load_prefixed(est.merge_classifier_, tensors, "merge_cls")

    est.n_tasks_ = int(payload["task_index"])
    est.classes_ = payload["class_order"].numpy().copy()
    mem = payload["memory"]
    est.memory_ = RehearsalMemory(mem["capacity"],
                                  {int(c): v.numpy().copy() for c, v in mem["exemplars"].items()},
                                  mem["quota"])
    est.attention_records_ = [AttentionRecord(t, e, m.numpy().copy())
                              for t, e, m in payload["attention"]]
    est.history_ = [dict(h) for h in payload["history"]]
    est.param_counts_ = list(payload["param_counts"])
    est.pruning_plans_ = [(i, PruningPlan({k: list(v) for k, v in p["removed"].items()},
                                          p["target_rate"], p["achieved_rate"], p["mode"]))
                          for i, p in payload["pruning_plans"]]
    est._set_train(False)
    return est
