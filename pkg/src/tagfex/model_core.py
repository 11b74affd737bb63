"""Feature extractors, expandable classifiers and the self-supervised heads."""

from __future__ import annotations

import contextlib
import copy
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "BackboneSpec", "ConvBackbone", "ResNet18Backbone", "build_backbone",
    "forward_features", "ExpandableClassifier", "expand_classifier",
    "AuxiliaryClassifier", "MLPHead", "freeze", "snapshot", "torch_seed",
    "count_parameters",
]


@contextlib.contextmanager
def torch_seed(seed: int):
    """Run the block under a fixed torch RNG seed without touching the global stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2 ** 63))
        yield


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------- extractors

@dataclass
class BackboneSpec:
    """``kind`` is ``"convnet"`` (desk scale) or ``"resnet18"``."""

    kind: str = "convnet"
    channels: List[int] = field(default_factory=lambda: [32, 64, 128, 128])
    in_channels: int = 3
    stem: str = "cifar"                       # resnet18 only: "cifar" 3x3 or "imagenet" 7x7
    inner_widths: Optional[List[int]] = None  # resnet18 only: per-block conv1 widths

    def to_dict(self):
        return asdict(self)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ConvBackbone(nn.Module):
    """Stride-2 conv/BN/ReLU blocks; a 32x32 input gives a 2x2 map after four blocks."""

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 128), in_channels: int = 3):
        super().__init__()
        if not channels:
            raise ValueError("at least one block is required")
        widths = [in_channels, *channels]
        self.blocks = nn.ModuleList(ConvBlock(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.in_channels = in_channels

    @property
    def channels(self) -> List[int]:
        return [b.conv.out_channels for b in self.blocks]

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].conv.out_channels

    @property
    def spec(self) -> BackboneSpec:
        return BackboneSpec("convnet", self.channels, self.in_channels)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected input (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        for block in self.blocks:
            x = block(x)
        return {"fmap": x, "features": x.mean(dim=(2, 3))}

    def prunable_layers(self):
        """(conv, bn, consumer conv or None) for every prunable filter bank."""
        convs = [b.conv for b in self.blocks]
        bns = [b.bn for b in self.blocks]
        nxt = convs[1:] + [None]
        return [(f"blocks.{i}", c, bn, n) for i, (c, bn, n) in enumerate(zip(convs, bns, nxt))]


class ResNet18Backbone(nn.Module):
    """torchvision ResNet18 trunk without pooling/fc.

    ``stem="cifar"`` swaps the 7x7/stride-2 stem and max-pool for a 3x3/stride-1
    conv, the usual choice for 32x32 inputs. ``inner_widths`` narrows the first
    conv of each basic block (the layers filter pruning touches).
    """

    def __init__(self, stem: str = "cifar", in_channels: int = 3,
                 inner_widths: Optional[Sequence[int]] = None):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if stem == "cifar":
            net.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
            net.maxpool = nn.Identity()
        elif stem == "imagenet":
            if in_channels != 3:
                net.conv1 = nn.Conv2d(in_channels, 64, 7, 2, 3, bias=False)
        else:
            raise ValueError(f"unknown stem {stem!r}")
        self.stem, self.in_channels = stem, in_channels
        self.trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                   net.layer1, net.layer2, net.layer3, net.layer4)
        if inner_widths is not None:
            blocks = self._basic_blocks()
            if len(inner_widths) != len(blocks):
                raise ValueError(f"inner_widths needs {len(blocks)} entries")
            for blk, w in zip(blocks, inner_widths):
                blk.conv1 = nn.Conv2d(blk.conv1.in_channels, w, 3, blk.conv1.stride, 1, bias=False)
                blk.bn1 = nn.BatchNorm2d(w)
                blk.conv2 = nn.Conv2d(w, blk.conv2.out_channels, 3, 1, 1, bias=False)

    def _basic_blocks(self):
        return [blk for layer in list(self.trunk)[4:] for blk in layer]

    @property
    def out_dim(self) -> int:
        return 512

    @property
    def spec(self) -> BackboneSpec:
        widths = [blk.conv1.out_channels for blk in self._basic_blocks()]
        return BackboneSpec("resnet18", [], self.in_channels, self.stem, widths)

    def forward(self, x):
        fmap = self.trunk(x)
        return {"fmap": fmap, "features": fmap.mean(dim=(2, 3))}

    def prunable_layers(self):
        out = []
        for li, layer in enumerate(list(self.trunk)[4:], start=1):
            for bi, blk in enumerate(layer):
                out.append((f"layer{li}.{bi}.conv1", blk.conv1, blk.bn1, blk.conv2))
        return out


def build_backbone(spec: BackboneSpec) -> nn.Module:
    if spec.kind == "convnet":
        return ConvBackbone(spec.channels, spec.in_channels)
    if spec.kind == "resnet18":
        return ResNet18Backbone(spec.stem, spec.in_channels, spec.inner_widths)
    raise ValueError(f"unknown backbone kind {spec.kind!r}")


def forward_features(extractor: nn.Module, batch: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Return the spatial map as (B, H, W, d) and the pooled (B, d) vector."""
    out = extractor(batch)
    return out["fmap"].permute(0, 2, 3, 1), out["features"]


# --------------------------------------------------------------------------- classifiers

class ExpandableClassifier(nn.Module):
    """Linear layer over concatenated feature blocks, grown one task at a time.

    Logits are computed block by block: for every group of classes (one per
    expansion) the partial products of each feature block are summed in
    block order. Old blocks are thus evaluated with the same shapes as before
    an expansion, and zero weights on new blocks add exact zeros, so old-class
    logits are reproduced bit for bit. A single dense matmul would not be:
    BLAS picks kernels by matrix size.
    """

    def __init__(self, in_dim: int, n_classes: int, splits: Optional[Sequence[int]] = None,
                 class_splits: Optional[Sequence[int]] = None):
        super().__init__()
        self.splits = [in_dim] if splits is None else [int(s) for s in splits if s]
        self.class_splits = ([n_classes] if class_splits is None
                             else [int(s) for s in class_splits if s])
        if sum(self.splits) != in_dim or sum(self.class_splits) != n_classes:
            raise ValueError(f"block sizes {self.class_splits} x {self.splits} do not match "
                             f"({n_classes}, {in_dim})")
        self.weight = nn.Parameter(torch.zeros(n_classes, in_dim))
        self.bias = nn.Parameter(torch.zeros(n_classes))

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        if len(self.splits) == 1 and len(self.class_splits) == 1:
            return F.linear(x, self.weight, self.bias)
        groups = []
        row = 0
        for n_rows in self.class_splits:
            rows = slice(row, row + n_rows)
            col = 0
            out = None
            for size in self.splits:
                cols = slice(col, col + size)
                w = self.weight[rows, cols]
                out = (F.linear(x[..., cols], w, self.bias[rows]) if out is None
                       else out + F.linear(x[..., cols], w))
                col += size
            groups.append(out)
            row += n_rows
        return torch.cat(groups, dim=-1)

    def keep_inputs(self, keep: torch.Tensor) -> "ExpandableClassifier":
        """Drop input columns not listed in ``keep`` (used after pruning)."""
        keep = torch.as_tensor(keep, dtype=torch.long)
        bounds = torch.tensor([0, *self.splits]).cumsum(0)
        splits = [int(((keep >= a) & (keep < b)).sum()) for a, b in zip(bounds[:-1], bounds[1:])]
        out = ExpandableClassifier(len(keep), self.n_classes, splits,
                                   self.class_splits).to(self.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.weight[:, keep])
            out.bias.copy_(self.bias)
        return out


def expand_classifier(old: Optional[ExpandableClassifier], new_classes: int,
                      new_feature_dim: int) -> ExpandableClassifier:
    """Grow by ``new_classes`` outputs and a new input block of ``new_feature_dim``.

    The old (classes x inputs) block is copied exactly; every new entry is 0,
    so logits of old classes ignore the new feature slice.
    """
    if old is None:
        return ExpandableClassifier(new_feature_dim, new_classes)
    n_old, d_old = old.weight.shape
    out = ExpandableClassifier(d_old + new_feature_dim, n_old + new_classes,
                               [*old.splits, new_feature_dim],
                               [*old.class_splits, new_classes]).to(old.weight.dtype)
    with torch.no_grad():
        out.weight[:n_old, :d_old] = old.weight
        out.bias[:n_old] = old.bias
    return out


class AuxiliaryClassifier(nn.Linear):
    """Current-task classes plus one bucket for every old class."""

    def __init__(self, in_dim: int, n_current: int):
        super().__init__(in_dim, n_current + 1)


class MLPHead(nn.Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


# --------------------------------------------------------------------------- freezing

def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    module._frozen = True
    return module


def snapshot(module: nn.Module) -> nn.Module:
    return freeze(copy.deepcopy(module))


def is_frozen(module: nn.Module) -> bool:
    return getattr(module, "_frozen", False)
