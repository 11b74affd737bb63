"""Geometric-median filter pruning of task-specific extractors.

Filters are ranked by their summed distance to the other filters of the same
layer: the smallest sums sit closest to the geometric median and are the
most replaceable. Per-layer removal counts are set so that the fraction of
removed extractor parameters lands within 2% of the requested rate.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
from torch import nn

from .model_core import count_parameters, freeze

__all__ = ["filter_scores", "PruningPlan", "build_plan", "apply_plan", "prune_extractor",
           "save_plan", "load_plan"]

RATE_TOLERANCE = 0.02


def filter_scores(layer_weights) -> np.ndarray:
    """Sum of Euclidean distances from each filter to every other filter.

    ``layer_weights`` is (K, ...) and is flattened per filter.
    """
    if torch.is_tensor(layer_weights):
        layer_weights = layer_weights.detach().cpu().numpy()
    w = np.asarray(layer_weights, dtype=np.float64)
    if w.ndim == 0 or w.shape[0] < 2:
        raise ValueError("need at least two filters to rank")
    w = w.reshape(w.shape[0], -1)
    return _distances(w).sum(1)


def _distances(w: np.ndarray) -> np.ndarray:
    # row by row: the full (K, K, D) difference tensor is too large for wide layers
    return np.stack([np.sqrt(((w - row) ** 2).sum(1)) for row in w])


def _fpgm_order(layer_weights) -> List[int]:
    """Removal order: exact copies of an earlier filter first, then by score."""
    w = layer_weights.detach().cpu().double().numpy().reshape(layer_weights.shape[0], -1)
    dist = _distances(w)
    scores = dist.sum(1)
    copies = [i for i in range(len(w)) if np.any(dist[i, :i] == 0)]
    rest = [i for i in np.argsort(scores, kind="stable") if i not in set(copies)]
    copies.sort(key=lambda i: (scores[i], i))
    return [int(i) for i in copies + rest]


def _pairwise_order(layer_weights, n_remove: int) -> List[int]:
    """Repeatedly take the closest remaining pair and drop its more central member."""
    w = np.asarray(layer_weights.detach().cpu().numpy() if torch.is_tensor(layer_weights)
                   else layer_weights, dtype=np.float64)
    w = w.reshape(w.shape[0], -1)
    dist = _distances(w)
    scores = dist.sum(1)
    np.fill_diagonal(dist, np.inf)
    alive = np.ones(len(w), bool)
    removed = []
    for _ in range(n_remove):
        masked = np.where(alive[:, None] & alive[None, :], dist, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        drop = i if (scores[i], i) <= (scores[j], j) else j
        removed.append(int(drop))
        alive[drop] = False
    return removed


@dataclass
class PruningPlan:
    """Per-layer filter indices to remove, listed in removal order."""

    removed: Dict[str, List[int]] = field(default_factory=dict)
    target_rate: float = 0.4
    achieved_rate: float = 0.0
    mode: str = "fpgm"

    def is_empty(self) -> bool:
        return not any(self.removed.values())


def _conv_params(conv: nn.Conv2d, out_ch: int, in_ch: int) -> int:
    k = conv.kernel_size[0] * conv.kernel_size[1]
    return out_ch * (in_ch // conv.groups) * k + (out_ch if conv.bias is not None else 0)


def _cut_map(layers, keep: List[int]):
    """For every touched conv: [module, kept outputs, kept inputs]; plus BN widths."""
    convs: Dict[int, list] = {}
    bns = []
    for (_, conv, bn, nxt), k in zip(layers, keep):
        convs.setdefault(id(conv), [conv, conv.out_channels, conv.in_channels])[1] = k
        if nxt is not None:
            convs.setdefault(id(nxt), [nxt, nxt.out_channels, nxt.in_channels])[2] = k
        if bn is not None:
            bns.append((bn, k))
    return convs, bns


def _pruned_param_count(model, keep: List[int]) -> int:
    """Extractor parameter count if prunable layer ``i`` kept ``keep[i]`` filters."""
    convs, bns = _cut_map(model.prunable_layers(), keep)
    total = count_parameters(model)
    for conv, out_ch, in_ch in convs.values():
        total -= _conv_params(conv, conv.out_channels, conv.in_channels)
        total += _conv_params(conv, out_ch, in_ch)
    for bn, k in bns:
        if bn.affine:
            total -= 2 * (bn.num_features - k)
    return total


def build_plan(model: nn.Module, target_rate: float, mode: str = "fpgm") -> PruningPlan:
    if not 0 < target_rate < 1:
        raise ValueError(f"target_rate must lie in (0, 1), got {target_rate}")
    if mode not in ("fpgm", "pairwise"):
        raise ValueError(f"unknown pruning mode {mode!r}")
    layers = model.prunable_layers()
    widths = [conv.out_channels for _, conv, _, _ in layers]
    base = count_parameters(model)

    def rate(keep):
        return 1 - _pruned_param_count(model, keep) / base

    # uniform keep fraction by bisection, then one-filter adjustments
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = (lo + hi) / 2
        keep = [max(1, int(round(w * (1 - mid)))) for w in widths]
        if rate(keep) < target_rate:
            lo = mid
        else:
            hi = mid
    keep = [max(1, int(round(w * (1 - lo)))) for w in widths]

    by_size = sorted(range(len(layers)), key=lambda i: -widths[i])
    for _ in range(4 * sum(widths)):
        err = rate(keep) - target_rate
        if abs(err) <= RATE_TOLERANCE / 2:
            break
        best, best_err = None, abs(err)
        for i in by_size:
            for step in (-1, 1):
                k = keep[i] + step
                if 1 <= k <= widths[i]:
                    trial = keep[:i] + [k] + keep[i + 1:]
                    e = abs(rate(trial) - target_rate)
                    if e < best_err - 1e-12:
                        best, best_err = trial, e
        if best is None:
            break
        keep = best

    removed = {}
    for (name, conv, _, _), w, k in zip(layers, widths, keep):
        n_remove = w - k
        if mode == "fpgm":
            removed[name] = _fpgm_order(conv.weight)[:n_remove]
        else:
            removed[name] = _pairwise_order(conv.weight, n_remove)
    return PruningPlan(removed, target_rate, rate(keep), mode)


def _slice_conv(conv: nn.Conv2d, out_keep=None, in_keep=None) -> nn.Conv2d:
    w = conv.weight.detach()
    if out_keep is not None:
        w = w[out_keep]
    if in_keep is not None:
        w = w[:, in_keep]
    new = nn.Conv2d(w.shape[1], w.shape[0], conv.kernel_size, conv.stride, conv.padding,
                    conv.dilation, bias=conv.bias is not None).to(w.dtype)
    with torch.no_grad():
        new.weight.copy_(w)
        if conv.bias is not None:
            b = conv.bias.detach()
            new.bias.copy_(b[out_keep] if out_keep is not None else b)
    return new


def _slice_bn(bn: nn.BatchNorm2d, keep) -> nn.BatchNorm2d:
    new = nn.BatchNorm2d(len(keep), bn.eps, bn.momentum, bn.affine,
                         bn.track_running_stats).to(bn.weight.dtype)
    with torch.no_grad():
        if bn.affine:
            new.weight.copy_(bn.weight[keep])
            new.bias.copy_(bn.bias[keep])
        if bn.track_running_stats:
            new.running_mean.copy_(bn.running_mean[keep])
            new.running_var.copy_(bn.running_var[keep])
            new.num_batches_tracked.copy_(bn.num_batches_tracked)
    return new


def _set_module(root: nn.Module, name: str, new: nn.Module):
    parent, _, child = name.rpartition(".")
    setattr(root.get_submodule(parent) if parent else root, child, new)


def apply_plan(model: nn.Module, plan: PruningPlan):
    """Return ``(pruned_copy, kept_output_channels)``; the input is left untouched.

    ``kept_output_channels`` indexes the surviving channels of the extractor's
    final feature map, for slicing downstream classifier columns.
    """
    layers = model.prunable_layers()
    names = [name for name, *_ in layers]
    unknown = set(plan.removed) - set(names)
    if unknown:
        raise ValueError(f"plan names unknown layers {sorted(unknown)}")

    module_name = {id(m): n for n, m in model.named_modules()}
    conv_cuts: Dict[str, list] = {}
    bn_cuts = {}
    final_keep = torch.arange(model.out_dim)
    for name, conv, bn, nxt in layers:
        drop = plan.removed.get(name, [])
        if len(set(drop)) != len(drop) or any(not 0 <= i < conv.out_channels for i in drop):
            raise ValueError(f"invalid filter indices for layer {name}")
        if len(drop) >= conv.out_channels:
            raise ValueError(f"plan removes every filter of layer {name}")
        keep = torch.tensor(sorted(set(range(conv.out_channels)) - set(drop)), dtype=torch.long)
        conv_cuts.setdefault(module_name[id(conv)], [None, None])[0] = keep
        if bn is not None:
            bn_cuts[module_name[id(bn)]] = keep
        if nxt is not None:
            conv_cuts.setdefault(module_name[id(nxt)], [None, None])[1] = keep
        else:
            final_keep = keep

    pruned = copy.deepcopy(model)
    if plan.is_empty():
        return pruned, final_keep
    for name, (out_keep, in_keep) in conv_cuts.items():
        _set_module(pruned, name, _slice_conv(pruned.get_submodule(name), out_keep, in_keep))
    for name, keep in bn_cuts.items():
        _set_module(pruned, name, _slice_bn(pruned.get_submodule(name), keep))
    pruned.train(model.training)
    if getattr(model, "_frozen", False):
        freeze(pruned)
    return pruned, final_keep


def prune_extractor(model: nn.Module, target_rate: float, mode: str = "fpgm"):
    plan = build_plan(model, target_rate, mode)
    pruned, keep = apply_plan(model, plan)
    return pruned, keep, plan


def save_plan(plan: PruningPlan, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({
        "mode": plan.mode,
        "target_rate": plan.target_rate,
        "achieved_rate": plan.achieved_rate,
        "removed": plan.removed,
    }, indent=2))
    return path


def load_plan(path) -> PruningPlan:
    data = json.loads(Path(path).read_text())
    return PruningPlan({k: list(v) for k, v in data["removed"].items()},
                       data["target_rate"], data["achieved_rate"], data["mode"])
