"""Expanding task-specific model and the losses applied to it."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .model_core import (AuxiliaryClassifier, BackboneSpec, ExpandableClassifier,
                         build_backbone, expand_classifier, freeze, torch_seed)

__all__ = [
    "LossWeights", "ExpandedModelSet", "concat_features", "classification_loss",
    "cls_loss", "aux_targets", "aux_loss", "transfer_loss", "ts_total", "overall_total",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_ta: float = 1.0
    lambda_mcls: float = 1.0

    def __post_init__(self):
        for name in ("lambda_ta", "lambda_mcls"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


class ExpandedModelSet(nn.Module):
    """Frozen extractors of past tasks, one trainable extractor, and the classifiers.

    ``task_sizes[t]`` is ``|C_t|``; class labels are ordinal so the classes of
    task ``t`` are ``range(sum(task_sizes[:t]), sum(task_sizes[:t+1]))``.
    """

    def __init__(self, backbone: BackboneSpec):
        super().__init__()
        self.backbone_spec = backbone
        self.extractors = nn.ModuleList()
        self.classifier: Optional[ExpandableClassifier] = None
        self.aux_classifier: Optional[AuxiliaryClassifier] = None
        self.task_sizes: List[int] = []

    # -- bookkeeping
    @property
    def n_tasks(self) -> int:
        return len(self.extractors)

    @property
    def n_classes(self) -> int:
        return sum(self.task_sizes)

    @property
    def known_classes(self) -> int:
        """Classes seen before the current task."""
        return sum(self.task_sizes[:-1])

    @property
    def feature_dims(self) -> List[int]:
        return [e.out_dim for e in self.extractors]

    @property
    def feature_dim(self) -> int:
        return sum(self.feature_dims)

    @property
    def current(self) -> nn.Module:
        return self.extractors[-1]

    def train(self, mode: bool = True):
        super().train(mode)
        for e in self.extractors[:-1]:
            e.eval()
        return self

    # -- lifecycle
    def begin_task(self, n_new_classes: int, seed: int = 0) -> "ExpandedModelSet":
        """Freeze the current extractor, add a fresh one and grow the classifiers."""
        if n_new_classes <= 0:
            raise ValueError("a task must bring at least one class")
        if self.extractors:
            freeze(self.extractors[-1])
        dtype = self.classifier.weight.dtype if self.classifier is not None else torch.float32
        with torch_seed(seed):
            new = build_backbone(self.backbone_spec).to(dtype)
        self.extractors.append(new)
        self.classifier = expand_classifier(self.classifier, n_new_classes, new.out_dim).to(dtype)
        self.task_sizes.append(n_new_classes)
        if self.n_tasks > 1:
            with torch_seed(seed + 1):
                self.aux_classifier = AuxiliaryClassifier(new.out_dim, n_new_classes).to(dtype)
        else:
            self.aux_classifier = None
        return self

    def replace_extractor(self, index: int, extractor: nn.Module, keep: torch.Tensor):
        """Swap in a pruned extractor; ``keep`` lists the surviving output channels."""
        if index == self.n_tasks - 1 and self.aux_classifier is not None:
            raise ValueError("cannot prune the trainable extractor mid-task")
        offset = sum(self.feature_dims[:index])
        cols = torch.cat([torch.arange(offset), offset + keep,
                          torch.arange(offset + self.feature_dims[index], self.feature_dim)])
        self.classifier = self.classifier.keep_inputs(cols)
        if index < self.n_tasks - 1:
            freeze(extractor)
        self.extractors[index] = extractor

    # -- forward
    def forward(self, x):
        feats = []
        for e in self.extractors[:-1]:
            with torch.no_grad():
                feats.append(e(x)["features"])
        out = self.current(x)
        feats.append(out["features"])
        features = torch.cat(feats, dim=1)
        result = {"logits": self.classifier(features), "features": features,
                  "fmap": out["fmap"], "new_features": out["features"]}
        if self.aux_classifier is not None:
            result["aux_logits"] = self.aux_classifier(out["features"])
        return result


def concat_features(model_set: ExpandedModelSet, x: torch.Tensor) -> torch.Tensor:
    """Pooled features of every extractor, in task order."""
    feats = [e(x)["features"] for e in model_set.extractors]
    for f, d in zip(feats, model_set.feature_dims):
        if f.shape[1] != d:
            raise ValueError(f"extractor produced {f.shape[1]} dims, expected {d}")
    return torch.cat(feats, dim=1)


def classification_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= logits.shape[-1]):
        raise ValueError(f"label outside the {logits.shape[-1]} seen classes")
    return F.cross_entropy(logits, y)


def cls_loss(model_set: ExpandedModelSet, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return classification_loss(model_set(x)["logits"], y)


def aux_targets(y: torch.Tensor, known_classes: int, n_current: int) -> torch.Tensor:
    """Old classes -> 0, current class ``known + r`` -> ``1 + r``."""
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= known_classes + n_current):
        raise ValueError("label outside the seen classes")
    return torch.where(y < known_classes, torch.zeros_like(y), y - known_classes + 1)


def aux_loss(aux_logits: torch.Tensor, y: torch.Tensor, known_classes: int) -> torch.Tensor:
    n_current = aux_logits.shape[-1] - 1
    return F.cross_entropy(aux_logits, aux_targets(y, known_classes, n_current))


def transfer_loss(merge_logits: torch.Tensor, ts_logits: torch.Tensor) -> torch.Tensor:
    """KL(p_merge || p_ts) averaged over the batch; the merge side is a constant."""
    if merge_logits.shape != ts_logits.shape:
        raise ValueError(
            f"class supports differ: {tuple(merge_logits.shape)} vs {tuple(ts_logits.shape)}")
    return F.kl_div(F.log_softmax(ts_logits, dim=-1),
                    F.log_softmax(merge_logits.detach(), dim=-1),
                    reduction="batchmean", log_target=True)


def ts_total(l_cls: torch.Tensor, l_aux: Optional[torch.Tensor] = None,
             l_trans: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Classification + auxiliary + transfer; absent terms are skipped, not zero-added."""
    total = l_cls
    if l_aux is not None:
        total = total + l_aux
    if l_trans is not None:
        total = total + l_trans
    return total


def overall_total(l_ts: torch.Tensor, weights: LossWeights,
                  l_ta: Optional[torch.Tensor] = None,
                  l_mcls: Optional[torch.Tensor] = None) -> torch.Tensor:
    terms = []
    if l_ta is not None and weights.lambda_ta:
        terms.append(weights.lambda_ta * l_ta)
    if l_mcls is not None and weights.lambda_mcls:
        terms.append(weights.lambda_mcls * l_mcls)
    terms.append(l_ts)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def restrict_to(logits: torch.Tensor, classes: Sequence[int]) -> torch.Tensor:
    return logits[..., list(classes)]
