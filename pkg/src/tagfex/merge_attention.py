"""Attention that lets task-specific tokens read from task-agnostic tokens."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .model_core import ExpandableClassifier, expand_classifier

__all__ = [
    "tokenize", "untokenize", "MergeAttention", "merge_forward", "merge_logits",
    "mcls_loss", "AttentionRecord", "record_attention", "save_attention_record",
    "load_attention_record",
]


def tokenize(fmap: torch.Tensor) -> torch.Tensor:
    """(B, H, W, d) or (H, W, d) map -> (B, H*W, d) or (H*W, d) tokens, row-major."""
    if fmap.dim() == 3:
        h, w, d = fmap.shape
        return fmap.reshape(h * w, d)
    if fmap.dim() == 4:
        b, h, w, d = fmap.shape
        return fmap.reshape(b, h * w, d)
    raise ValueError(f"expected an (H, W, d) map, got shape {tuple(fmap.shape)}")


def untokenize(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return tokens.reshape(*tokens.shape[:-2], height, width, tokens.shape[-1])


class MergeAttention(nn.Module):
    """Task-specific queries over concatenated task-specific and task-agnostic keys.

    Each feature space has its own layer norm and key/value projections; only
    the task-specific side is projected to queries. The task-agnostic input is
    detached before its layer norm. Keys and values are stacked with the
    task-specific tokens first.
    """

    def __init__(self, dim: int, n_heads: int = 1, ta_dim: Optional[int] = None):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} is not divisible by {n_heads} heads")
        ta_dim = dim if ta_dim is None else ta_dim
        self.dim, self.n_heads, self.ta_dim = dim, n_heads, ta_dim
        self.norm_ts = nn.LayerNorm(dim)
        self.norm_ta = nn.LayerNorm(ta_dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k_ts = nn.Linear(dim, dim, bias=False)
        self.v_ts = nn.Linear(dim, dim, bias=False)
        self.k_ta = nn.Linear(ta_dim, dim, bias=False)
        self.v_ta = nn.Linear(ta_dim, dim, bias=False)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.dim // self.n_heads).transpose(1, 2)

    def forward(self, tokens_ts: torch.Tensor, tokens_ta: torch.Tensor
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, N, d) and (B, M, d_ta) tokens -> merged (B, N, d), attention (B, N, N + M)."""
        if tokens_ts.dim() != 3 or tokens_ta.dim() != 3:
            raise ValueError("token batches must be 3-d (B, N, d)")
        if tokens_ts.shape[0] != tokens_ta.shape[0]:
            raise ValueError("batch sizes differ")
        if tokens_ts.shape[-1] != self.dim or tokens_ta.shape[-1] != self.ta_dim:
            raise ValueError(
                f"token dims {tokens_ts.shape[-1]}/{tokens_ta.shape[-1]} do not match "
                f"block dims {self.dim}/{self.ta_dim}")
        z_ts = self.norm_ts(tokens_ts)
        z_ta = self.norm_ta(tokens_ta.detach())

        q = self._heads(self.q(z_ts))
        k = self._heads(torch.cat([self.k_ts(z_ts), self.k_ta(z_ta)], dim=1))
        v = self._heads(torch.cat([self.v_ts(z_ts), self.v_ta(z_ta)], dim=1))
        scale = (self.dim / self.n_heads) ** -0.5
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)   # (B, h, N, N+M)
        out = (attn @ v).transpose(1, 2).reshape(tokens_ts.shape[0], -1, self.dim)
        return out, attn.mean(dim=1)


def merge_forward(fmap_ts: torch.Tensor, fmap_ta: torch.Tensor, block: MergeAttention
                  ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Spatial maps (B, H, W, d) in, merged tokens and head-averaged attention out."""
    if fmap_ts.dim() != 4 or fmap_ta.dim() != 4:
        raise ValueError("feature maps must be (B, H, W, d)")
    return block(tokenize(fmap_ts), tokenize(fmap_ta))


def merge_logits(merged: torch.Tensor, classifier: ExpandableClassifier) -> torch.Tensor:
    """Average the merged tokens and classify."""
    return classifier(merged.mean(dim=-2))


def mcls_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= logits.shape[-1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[-1]})")
    return F.cross_entropy(logits, y)


def expand_merge_classifier(old: Optional[ExpandableClassifier], new_classes: int,
                            dim: int) -> ExpandableClassifier:
    if old is None:
        return expand_classifier(None, new_classes, dim)
    return expand_classifier(old, new_classes, 0)


# --------------------------------------------------------------------------- recording

@dataclass
class AttentionRecord:
    task: int
    epoch: int
    matrix: np.ndarray          # (N, N + M) averaged over probe samples

    @property
    def n_ts(self) -> int:
        return self.matrix.shape[0]

    def ta_mass(self) -> float:
        """Mean over query rows of the mass placed on task-agnostic keys."""
        return float(self.matrix[:, self.n_ts:].sum(axis=1).mean())

    def ts_mass(self) -> float:
        return float(self.matrix[:, :self.n_ts].sum(axis=1).mean())

    def display_matrix(self) -> np.ndarray:
        """Task-agnostic columns on the left, as usually drawn."""
        return np.concatenate([self.matrix[:, self.n_ts:], self.matrix[:, :self.n_ts]], axis=1)


def record_attention(maps, task: int, epoch: int) -> AttentionRecord:
    maps = maps.detach().cpu().numpy() if torch.is_tensor(maps) else np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError("expected per-sample maps (B, N, N + M)")
    return AttentionRecord(task, epoch, maps.astype(np.float64).mean(axis=0))


def save_attention_record(record: AttentionRecord, directory) -> Path:
    path = Path(directory) / f"attn_t{record.task}_e{record.epoch}.txt"
    n, m = record.matrix.shape
    np.savetxt(path, record.matrix, fmt="%.17g", header=f"{n} {m}")
    return path


def load_attention_record(path) -> AttentionRecord:
    path = Path(path)
    with open(path) as fh:
        n, m = map(int, fh.readline().lstrip("#").split())
    matrix = np.loadtxt(path, ndmin=2)
    if matrix.shape != (n, m):
        raise ValueError(f"{path}: header says {(n, m)}, data is {matrix.shape}")
    stem = path.stem                       # attn_t{task}_e{epoch}
    task, epoch = stem[len("attn_t"):].split("_e")
    return AttentionRecord(int(task), int(epoch), matrix)
