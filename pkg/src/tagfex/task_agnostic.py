"""Continual self-supervised learning of the task-agnostic extractor."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .model_core import BackboneSpec, MLPHead, build_backbone, snapshot, torch_seed

__all__ = [
    "infonce", "ta_loss_initial", "ta_loss_incremental", "TaskAgnosticModel",
    "TaskAgnosticState", "end_task_snapshot",
]


def _cosine_matrix(z: torch.Tensor, z_prime: torch.Tensor) -> torch.Tensor:
    return F.normalize(z, dim=1) @ F.normalize(z_prime, dim=1).T


def infonce(z: torch.Tensor, z_prime: torch.Tensor, temperature: float = 0.1,
            symmetric: bool = False) -> torch.Tensor:
    """Mean log-ratio of positive to negative cosine similarities.

    The default form pairs ``z[i]`` with ``z_prime[i]`` and puts only the
    other ``z_prime[j]`` (``j != i``) in the denominator. ``symmetric=True``
    gives the NT-Xent variant over all ``2B`` views, where the denominator
    also holds the positive and same-view negatives. Larger is better;
    losses negate it.
    """
    if z.dim() != 2 or z.shape != z_prime.shape:
        raise ValueError(f"expected two (B, k) batches, got {tuple(z.shape)} and {tuple(z_prime.shape)}")
    if z.shape[0] < 2:
        raise ValueError("InfoNCE needs at least two pairs")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    B = z.shape[0]
    if symmetric:
        both = torch.cat([z, z_prime])
        logits = _cosine_matrix(both, both) / temperature
        self_mask = torch.eye(2 * B, dtype=torch.bool, device=z.device)
        logits = logits.masked_fill(self_mask, float("-inf"))
        pos = torch.cat([torch.arange(B, 2 * B), torch.arange(B)]).to(z.device)
        return -F.cross_entropy(logits, pos)

    logits = _cosine_matrix(z, z_prime) / temperature
    diag = torch.eye(B, dtype=torch.bool, device=z.device)
    negatives = torch.logsumexp(logits.masked_fill(diag, float("-inf")), dim=1)
    return (logits.diagonal() - negatives).mean()


def ta_loss_initial(z_a: torch.Tensor, z_b: torch.Tensor, temperature: float = 0.1,
                    symmetric: bool = False) -> torch.Tensor:
    return -infonce(z_a, z_b, temperature, symmetric)


def ta_loss_incremental(z_a: torch.Tensor, z_b: torch.Tensor, predicted: torch.Tensor,
                        target: Optional[torch.Tensor], temperature: float = 0.1,
                        symmetric: bool = False) -> torch.Tensor:
    """Contrastive term plus the predictive term against the frozen snapshot.

    ``predicted`` is the predictor output on the current projections and
    ``target`` the snapshot's projections of the same inputs; ``target`` is
    detached here regardless of how it was produced.
    """
    if target is None:
        raise ValueError("the predictive term needs the previous task's snapshot")
    return (-infonce(z_a, z_b, temperature, symmetric)
            - infonce(predicted, target.detach(), temperature, symmetric))


class TaskAgnosticModel(nn.Module):
    """Backbone plus the projection head that defines the contrastive space."""

    def __init__(self, backbone: BackboneSpec, proj_dim: int = 128):
        super().__init__()
        self.backbone_spec = backbone
        self.backbone = build_backbone(backbone)
        d = self.backbone.out_dim
        self.projector = MLPHead(d, d, proj_dim)

    @property
    def out_dim(self) -> int:
        return self.backbone.out_dim

    def forward(self, x):
        out = self.backbone(x)
        out["proj"] = self.projector(out["features"])
        return out


class TaskAgnosticState(nn.Module):
    """Current model, frozen previous-task copy and the temporal predictor."""

    def __init__(self, backbone: BackboneSpec, proj_dim: int = 128,
                 temperature: float = 0.1, symmetric: bool = False, seed: int = 0):
        super().__init__()
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        self.proj_dim = proj_dim
        self.temperature = temperature
        self.symmetric = symmetric
        with torch_seed(seed):
            self.model = TaskAgnosticModel(backbone, proj_dim)
        self.previous: Optional[TaskAgnosticModel] = None
        self.predictor: Optional[MLPHead] = None

    def train(self, mode: bool = True):
        super().train(mode)
        if self.previous is not None:
            self.previous.eval()
        return self

    def reset_predictor(self, seed: int):
        with torch_seed(seed):
            self.predictor = MLPHead(self.proj_dim, self.proj_dim, self.proj_dim).to(
                next(self.model.parameters()).dtype)

    def loss(self, view_a: torch.Tensor, view_b: torch.Tensor,
             use_predictive: bool = True) -> Tuple[torch.Tensor, Dict[str, float]]:
        both = self.model(torch.cat([view_a, view_b]))["proj"]
        z_a, z_b = both.chunk(2)
        if use_predictive and self.previous is not None:
            if self.predictor is None:
                raise RuntimeError("predictor missing; call reset_predictor first")
            with torch.no_grad():
                target = self.previous(view_a)["proj"]
            contrast = -infonce(z_a, z_b, self.temperature, self.symmetric)
            predict = -infonce(self.predictor(z_a), target, self.temperature, self.symmetric)
            return contrast + predict, {"ta_contrast": contrast.item(), "ta_predict": predict.item()}
        contrast = ta_loss_initial(z_a, z_b, self.temperature, self.symmetric)
        return contrast, {"ta_contrast": contrast.item()}


def end_task_snapshot(state: TaskAgnosticState, seed: int) -> TaskAgnosticState:
    """Freeze a copy of the current model and start a fresh predictor."""
    state.previous = snapshot(state.model)
    state.reset_predictor(seed)
    return state

