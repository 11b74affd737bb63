"""scikit-learn style class-incremental estimators.

Each :meth:`TagFexClassifier.partial_fit` call learns one task: the labels it
receives must all be classes the estimator has not seen. Rehearsal exemplars
of earlier tasks are kept internally and mixed into every batch.
"""

from __future__ import annotations

import logging
import zlib
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels, check_positive, to_nchw
from .datastream import PIPELINES, RehearsalMemory, TaskDataset, augment_batch, rebalance_memory
from .merge_attention import (AttentionRecord, MergeAttention, expand_merge_classifier,
                              merge_logits, record_attention, tokenize)
from .model_core import BackboneSpec, count_parameters, torch_seed
from .pruning import prune_extractor
from .task_agnostic import TaskAgnosticState, end_task_snapshot
from .task_specific import (ExpandedModelSet, LossWeights, aux_loss, classification_loss,
                            overall_total, transfer_loss, ts_total)

logger = logging.getLogger(__name__)

__all__ = ["TagFexClassifier", "DERClassifier", "component_seed"]

_SUPPORTS = ("all", "current")


def component_seed(random_state: int, task: int, component: str) -> int:
    """Seed for one component of one task, independent of call order."""
    key = zlib.crc32(component.encode())
    return int(np.random.SeedSequence([int(random_state), int(task), key]).generate_state(1)[0])


class TagFexClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Expanding classifier guided by a continually self-supervised extractor.

    Parameters
    ----------
    channels : tuple of int
        Widths of the conv backbone blocks (``backbone="convnet"``).
    backbone : {"convnet", "resnet18"}
    epochs, batch_size, lr, momentum, weight_decay :
        SGD with a cosine schedule restarted at each task.
    memory_size : int
        Rehearsal capacity, constant over the stream.
    lambda_ta, lambda_mcls : float
        Weights of the self-supervised and merge-classifier losses.
    temperature : float
        InfoNCE temperature.
    symmetric_infonce : bool
        Use the 2B-view NT-Xent form instead of the pairwise form.
    n_heads : int
        Merge attention heads.
    continual_ta : bool
        Keep the task-agnostic model across tasks and add the predictive
        term; when False it is re-initialised each task.
    merge : bool
        Train the merge attention and merge classifier.
    transfer : bool
        Distill merge-classifier predictions into the main classifier.
    t0_merge : bool
        Also run merge/transfer on the first task.
    mcls_support, transfer_support : {"all", "current"}
        Classes the merge loss and the transfer KL range over.
    transfer_samples : {"all", "new"}
        Whether rehearsal samples enter the transfer loss.
    ta_on_memory : bool
        Whether rehearsal samples enter the contrastive loss.
    prune_rate : float or None
        Prune each task-specific extractor to this rate when it is frozen.
    der_baseline : bool
        Switch off every task-agnostic component.
    """

    def __init__(self, *, backbone="convnet", channels=(32, 64, 128, 128), stem="cifar",
                 epochs=20, batch_size=32, lr=0.05, momentum=0.9, weight_decay=5e-4,
                 memory_size=2000, lambda_ta=1.0, lambda_mcls=1.0, temperature=0.1,
                 symmetric_infonce=False, proj_dim=128, n_heads=4, augment="simclr",
                 continual_ta=True, merge=True, transfer=True, t0_merge=True,
                 mcls_support="all", transfer_support="all", transfer_samples="all",
                 ta_on_memory=True, prune_rate=None, prune_mode="fpgm",
                 record_attention=True, probe_size=16, shuffle=True,
                 der_baseline=False, dtype="float32", random_state=0):
        self.backbone = backbone
        self.channels = channels
        self.stem = stem
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.memory_size = memory_size
        self.lambda_ta = lambda_ta
        self.lambda_mcls = lambda_mcls
        self.temperature = temperature
        self.symmetric_infonce = symmetric_infonce
        self.proj_dim = proj_dim
        self.n_heads = n_heads
        self.augment = augment
        self.continual_ta = continual_ta
        self.merge = merge
        self.transfer = transfer
        self.t0_merge = t0_merge
        self.mcls_support = mcls_support
        self.transfer_support = transfer_support
        self.transfer_samples = transfer_samples
        self.ta_on_memory = ta_on_memory
        self.prune_rate = prune_rate
        self.prune_mode = prune_mode
        self.record_attention = record_attention
        self.probe_size = probe_size
        self.shuffle = shuffle
        self.der_baseline = der_baseline
        self.dtype = dtype
        self.random_state = random_state

    # ------------------------------------------------------------------ configuration
    def _validate_params(self):
        check_positive(self.epochs, "epochs", allow_zero=True)
        check_positive(self.batch_size, "batch_size")
        check_positive(self.lr, "lr")
        check_positive(self.temperature, "temperature")
        check_positive(self.memory_size, "memory_size", allow_zero=True)
        LossWeights(self.lambda_ta, self.lambda_mcls)
        for name in ("mcls_support", "transfer_support"):
            if getattr(self, name) not in _SUPPORTS:
                raise ValueError(f"{name} must be one of {_SUPPORTS}")
        if self.transfer_samples not in ("all", "new"):
            raise ValueError("transfer_samples must be 'all' or 'new'")
        if self.augment not in PIPELINES:
            raise ValueError(f"augment must be one of {sorted(PIPELINES)}")
        if self.prune_rate is not None and not 0 < self.prune_rate < 1:
            raise ValueError("prune_rate must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def _torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def _backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.backbone, list(self.channels), 3, self.stem)

    @property
    def uses_ta(self) -> bool:
        """Whether a task-agnostic model is needed at all."""
        return not self.der_baseline and (self.lambda_ta > 0 or self._merge_on)

    @property
    def _merge_on(self) -> bool:
        return not self.der_baseline and self.merge

    def _merge_active(self, task: int) -> bool:
        return self._merge_on and (task > 0 or self.t0_merge)

    def _transfer_active(self, task: int) -> bool:
        return self._merge_active(task) and self.transfer

    def _ta_loss_active(self) -> bool:
        return not self.der_baseline and self.lambda_ta > 0

    def _seed(self, task: int, component: str) -> int:
        return component_seed(self.random_state, task, component)

    # ------------------------------------------------------------------ fitting
    def fit(self, X, y, **fit_params):
        """Learn ``X, y`` as the first and only task, discarding previous state."""
        for attr in list(vars(self)):
            if attr.endswith("_") and not attr.startswith("__"):
                delattr(self, attr)
        return self.partial_fit(X, y, **fit_params)

    def fit_tasks(self, tasks: List[TaskDataset], **fit_params):
        for task in tasks:
            self.partial_fit(task.images, task.labels, **fit_params)
        return self

    def partial_fit(self, X, y, on_step: Optional[Callable] = None,
                    on_epoch: Optional[Callable] = None):
        """Learn one new task made of the classes present in ``y``.

        ``on_step(estimator, task, epoch, step, losses)`` and
        ``on_epoch(estimator, task, epoch)`` are optional hooks.
        """
        self._validate_params()
        X = check_images(X)
        y = check_labels(y, len(X))
        if len(X) == 0:
            raise ValueError("a task needs at least one sample")

        if not hasattr(self, "classes_"):
            self._init_state(X.shape[1:])
        elif X.shape[1:] != self.image_shape_:
            raise ValueError(f"image shape {X.shape[1:]} differs from {self.image_shape_}")
        new_classes = np.unique(y)
        seen = set(self.classes_.tolist())
        if seen & set(new_classes.tolist()):
            raise ValueError("partial_fit expects only unseen classes; "
                             f"got {sorted(seen & set(new_classes.tolist()))} again")

        task = self.n_tasks_
        known = len(self.classes_)
        self.classes_ = np.concatenate([self.classes_, new_classes])
        ordinal = np.searchsorted(new_classes, y) + known
        current = TaskDataset(task, X, ordinal, range(known, len(self.classes_)))

        self._begin_task(task, len(new_classes))
        self._train_task(task, current, on_step, on_epoch)
        self._end_task(task, current)
        self.n_tasks_ += 1
        return self

    def _init_state(self, image_shape):
        self.image_shape_ = tuple(image_shape)
        self.classes_ = np.zeros(0, dtype=np.int64)
        self.n_tasks_ = 0
        self.model_set_ = ExpandedModelSet(self._backbone_spec())
        self.memory_ = RehearsalMemory(int(self.memory_size))
        self.ta_state_ = None
        self.merge_block_ = None
        self.merge_classifier_ = None
        self.attention_records_: List[AttentionRecord] = []
        self.history_: List[Dict[str, float]] = []
        self.param_counts_: List[int] = []
        self.pruning_plans_ = []

    def _begin_task(self, task: int, n_new: int):
        dtype = self._torch_dtype
        if task > 0 and self.prune_rate is not None:
            self._prune_extractor(task - 1)
        if not self.model_set_.extractors:
            self.model_set_.to(dtype)
        self.model_set_.begin_task(n_new, self._seed(task, "task_specific"))
        self.model_set_.to(dtype)

        if self.uses_ta:
            spec = self._backbone_spec()
            if self.ta_state_ is None or not self.continual_ta:
                self.ta_state_ = TaskAgnosticState(
                    spec, self.proj_dim, self.temperature, self.symmetric_infonce,
                    seed=self._seed(task, "task_agnostic")).to(dtype)
        if self._merge_on:
            d = self.model_set_.current.out_dim
            if self.merge_block_ is None:
                with torch_seed(self._seed(task, "merge")):
                    self.merge_block_ = MergeAttention(
                        d, self.n_heads, self.ta_state_.model.out_dim).to(dtype)
            self.merge_classifier_ = expand_merge_classifier(
                self.merge_classifier_, n_new, d).to(dtype)

    def _prune_extractor(self, index: int):
        extractor = self.model_set_.extractors[index]
        pruned, keep, plan = prune_extractor(extractor, self.prune_rate, self.prune_mode)
        self.model_set_.replace_extractor(index, pruned, keep)
        self.pruning_plans_.append((index, plan))

    def _optimizer(self, task: int):
        params = [p for p in self.model_set_.current.parameters()]
        params += list(self.model_set_.classifier.parameters())
        if self.model_set_.aux_classifier is not None:
            params += list(self.model_set_.aux_classifier.parameters())
        if self._ta_loss_active():
            params += list(self.ta_state_.model.parameters())
            if self.ta_state_.predictor is not None and self.continual_ta:
                params += list(self.ta_state_.predictor.parameters())
        if self._merge_active(task):
            params += list(self.merge_block_.parameters())
            params += list(self.merge_classifier_.parameters())
        opt = torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, int(self.epochs)))
        return opt, sched

    def _train_task(self, task, current: TaskDataset, on_step, on_epoch):
        mem_x, mem_y = self.memory_.data()
        if len(mem_y):
            pool_x = np.concatenate([current.images, mem_x])
            pool_y = np.concatenate([current.labels, mem_y])
        else:
            pool_x, pool_y = current.images, current.labels
        pool_t = to_nchw(pool_x, self._torch_dtype)
        pool_y_t = torch.from_numpy(pool_y)
        n = len(pool_y)
        n_new = len(current)

        probe = to_nchw(current.images[: self.probe_size], self._torch_dtype)
        opt, sched = self._optimizer(task)
        aug_cfg = PIPELINES[self.augment]
        data_seed = self._seed(task, "data")

        for epoch in range(int(self.epochs)):
            self._set_train(True)
            if self.shuffle:
                order = np.random.default_rng([data_seed, epoch]).permutation(n)
            else:
                order = np.arange(n)
            for step, start in enumerate(range(0, n, int(self.batch_size))):
                idx = order[start:start + int(self.batch_size)]
                aug_seeds = [int(s) for s in np.random.SeedSequence(
                    [data_seed, epoch, step]).generate_state(len(idx))]
                losses = self._train_step(task, opt, pool_t[idx], pool_y_t[idx],
                                          pool_x[idx], idx < n_new, aug_seeds, aug_cfg)
                losses.update(task=task, epoch=epoch, step=step)
                self.history_.append(losses)
                if on_step is not None:
                    on_step(self, task, epoch, step, losses)
            sched.step()
            if self.record_attention and self._merge_active(task):
                self.attention_records_.append(self._probe_attention(task, epoch, probe))
            if on_epoch is not None:
                on_epoch(self, task, epoch)
        self._set_train(False)

    def _set_train(self, mode: bool):
        self.model_set_.train(mode)
        if self.ta_state_ is not None:
            # without its own loss the task-agnostic model is a fixed feature source
            self.ta_state_.train(mode and self._ta_loss_active())
        if self.merge_block_ is not None:
            self.merge_block_.train(mode)
            self.merge_classifier_.train(mode)

    def _train_step(self, task, opt, x, y, x_np, is_new, aug_seeds, aug_cfg):
        ms = self.model_set_
        out = ms(x)
        l_cls = classification_loss(out["logits"], y)
        l_aux = aux_loss(out["aux_logits"], y, ms.known_classes) if "aux_logits" in out else None
        parts = {"cls": l_cls.item()}
        if l_aux is not None:
            parts["aux"] = l_aux.item()

        l_ta = l_mcls = l_trans = None
        if self._ta_loss_active():
            ta_idx = np.arange(len(x_np)) if self.ta_on_memory else np.flatnonzero(is_new)
            if len(ta_idx) >= 2:
                va, vb = augment_batch(x_np[ta_idx], [aug_seeds[i] for i in ta_idx], aug_cfg)
                va = to_nchw(va, x.dtype)
                vb = to_nchw(vb, x.dtype)
                l_ta, ta_parts = self.ta_state_.loss(va, vb, use_predictive=self.continual_ta)
                parts.update(ta_parts)

        if self._merge_active(task):
            with torch.no_grad():
                fmap_ta = self.ta_state_.model(x)["fmap"]
            merged, _ = self.merge_block_(tokenize(out["fmap"].permute(0, 2, 3, 1)),
                                          tokenize(fmap_ta.permute(0, 2, 3, 1)))
            m_logits = merge_logits(merged, self.merge_classifier_)
            l_mcls = self._mcls(m_logits, y, ms)
            parts["mcls"] = l_mcls.item()
            if self._transfer_active(task):
                l_trans = self._transfer(m_logits, out["logits"], is_new, ms)
                if l_trans is not None:
                    parts["trans"] = l_trans.item()

        l_ts = ts_total(l_cls, l_aux, l_trans)
        loss = overall_total(l_ts, LossWeights(self.lambda_ta, self.lambda_mcls), l_ta, l_mcls)
        parts["total"] = loss.item()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return parts

    def _current_slice(self, ms):
        return slice(ms.known_classes, ms.n_classes)

    def _mcls(self, m_logits, y, ms):
        if self.mcls_support == "all":
            return classification_loss(m_logits, y)
        mask = y >= ms.known_classes
        cur = self._current_slice(ms)
        return classification_loss(m_logits[mask][:, cur], y[mask] - ms.known_classes)

    def _transfer(self, m_logits, ts_logits, is_new, ms):
        if self.transfer_samples == "new":
            keep = torch.from_numpy(np.asarray(is_new))
            if not keep.any():
                return None
            m_logits, ts_logits = m_logits[keep], ts_logits[keep]
        if self.transfer_support == "current":
            cur = self._current_slice(ms)
            m_logits, ts_logits = m_logits[:, cur], ts_logits[:, cur]
        return transfer_loss(m_logits, ts_logits)

    @torch.no_grad()
    def _probe_attention(self, task, epoch, probe) -> AttentionRecord:
        self._set_train(False)
        fmap_ts = self.model_set_.current(probe)["fmap"]
        fmap_ta = self.ta_state_.model(probe)["fmap"]
        _, attn = self.merge_block_(tokenize(fmap_ts.permute(0, 2, 3, 1)),
                                    tokenize(fmap_ta.permute(0, 2, 3, 1)))
        self._set_train(True)
        return record_attention(attn, task, epoch)

    def _end_task(self, task, current: TaskDataset):
        self._set_train(False)
        if self.uses_ta and self.continual_ta:
            end_task_snapshot(self.ta_state_, self._seed(task + 1, "predictor"))
        if self.memory_.capacity > 0:
            self.memory_ = rebalance_memory(self.memory_, current, self._herding_features)
        self.param_counts_.append(self.inference_param_count())

    @torch.no_grad()
    def _herding_features(self, images):
        self.model_set_.eval()
        x = to_nchw(images, self._torch_dtype)
        return torch.cat([self.model_set_(x[i:i + 256])["features"]
                          for i in range(0, len(x), 256)]).double().numpy()

    # ------------------------------------------------------------------ inference
    def inference_param_count(self) -> int:
        """Parameters used at prediction time: every extractor plus the main classifier."""
        return count_parameters(self.model_set_.extractors) + count_parameters(
            self.model_set_.classifier)

    @torch.no_grad()
    def decision_function(self, X):
        check_is_fitted(self, "classes_")
        X = check_images(X, name="X")
        self._set_train(False)
        x = to_nchw(X, self._torch_dtype)
        logits = [self.model_set_(x[i:i + 256])["logits"] for i in range(0, len(x), 256)]
        return torch.cat(logits).double().numpy()

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    @torch.no_grad()
    def transform(self, X):
        """Concatenated pooled features of every task-specific extractor."""
        check_is_fitted(self, "classes_")
        X = check_images(X)
        self._set_train(False)
        x = to_nchw(X, self._torch_dtype)
        return torch.cat([self.model_set_(x[i:i + 256])["features"]
                          for i in range(0, len(x), 256)]).double().numpy()

    def extractor_features(self, X) -> List[np.ndarray]:
        """Pooled features of each task-specific extractor separately."""
        feats = self.transform(X)
        bounds = np.cumsum([0, *self.model_set_.feature_dims])
        return [feats[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.two_d_array = False
        return tags


class DERClassifier(TagFexClassifier):
    """The expansion baseline: classification and auxiliary losses only."""

    def __init__(self, *, backbone="convnet", channels=(32, 64, 128, 128), stem="cifar",
                 epochs=20, batch_size=32, lr=0.05, momentum=0.9, weight_decay=5e-4,
                 memory_size=2000, prune_rate=None, prune_mode="fpgm", probe_size=16,
                 shuffle=True, dtype="float32", random_state=0):
        super().__init__(backbone=backbone, channels=channels, stem=stem, epochs=epochs,
                         batch_size=batch_size, lr=lr, momentum=momentum,
                         weight_decay=weight_decay, memory_size=memory_size,
                         prune_rate=prune_rate, prune_mode=prune_mode,
                         probe_size=probe_size, shuffle=shuffle, dtype=dtype,
                         random_state=random_state, der_baseline=True, lambda_ta=0.0,
                         lambda_mcls=0.0, merge=False, transfer=False,
                         record_attention=False)
