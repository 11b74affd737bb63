import numpy as np
import pytest
import torch
from sklearn.base import clone

from tagfex import DERClassifier, TagFexClassifier
from tagfex.model_core import BackboneSpec

from oracles import HandWiredDER

SMALL = dict(channels=(4, 8), proj_dim=8, n_heads=2, batch_size=4, memory_size=0)


def _task(labels, n_per=6, seed=0, size=8):
    rng = np.random.default_rng(seed)
    y = np.repeat(labels, n_per)
    X = rng.random((len(y), size, size, 3)).astype(np.float32)
    return X, y


def _params(modules):
    return [p.detach().clone() for m in modules for p in m.parameters()]


# ---------------------------------------------------------------- DER reduction

@pytest.mark.parametrize("cls", [DERClassifier, TagFexClassifier])
def test_der_reduction_is_bitwise(cls):
    kw = dict(channels=(4, 8), batch_size=4, memory_size=0, epochs=1, shuffle=False,
              lr=0.1, random_state=7)
    if cls is TagFexClassifier:
        kw.update(der_baseline=True, proj_dim=8, n_heads=2)
    est = cls(**kw)
    trajectory = []
    est_hook = lambda e, task, epoch, step, losses: trajectory.append(
        _params([e.model_set_.current, e.model_set_.classifier]
                + ([e.model_set_.aux_classifier] if e.model_set_.aux_classifier else [])))
    tasks = [_task([0, 1], 6, 0), _task([2, 3], 6, 1)]
    for X, y in tasks:
        est.partial_fit(X, y, on_step=est_hook)
    assert len(trajectory) == 6                       # 3 steps per task

    hand = HandWiredDER(BackboneSpec("convnet", [4, 8]), 0.1, 0.9, 5e-4, 7)
    want = []
    for t, (X, y) in enumerate(tasks):
        hand.begin(t, 2)
        x = torch.from_numpy(X).permute(0, 3, 1, 2).contiguous()
        for s in range(3):
            hand.step(x[4 * s:4 * s + 4], torch.from_numpy(y[4 * s:4 * s + 4]))
            want.append(_params(hand.modules()))
    for got, ref in zip(trajectory, want):
        assert len(got) == len(ref)
        assert all(torch.equal(a, b) for a, b in zip(got, ref))


def test_der_builds_no_task_agnostic_parts():
    est = DERClassifier(channels=(4, 8), epochs=1, batch_size=4).partial_fit(*_task([0, 1]))
    assert est.ta_state_ is None and est.merge_block_ is None
    assert not est.attention_records_
    assert all(set(h) <= {"cls", "aux", "total", "task", "epoch", "step"} for h in est.history_)


# ---------------------------------------------------------------- freezing

def _freeze_run(**kw):
    est = TagFexClassifier(epochs=1, random_state=3, **SMALL, **kw)
    est.partial_fit(*_task([0, 1], 4, 0))
    frozen = _params([est.model_set_.extractors[0]])
    frozen_buf = [b.clone() for b in est.model_set_.extractors[0].buffers()]
    prev = _params([est.ta_state_.previous])
    ta_model = _params([est.ta_state_.model])
    ta_buf = [b.clone() for b in est.ta_state_.model.buffers()]
    seen = {}

    def hook(e, task, epoch, step, losses):
        if task == 1 and step == 0:
            seen["frozen"] = _params([e.model_set_.extractors[0]])
            seen["frozen_buf"] = [b.clone() for b in e.model_set_.extractors[0].buffers()]
            seen["prev"] = _params([e.ta_state_.previous])
            seen["ta"] = _params([e.ta_state_.model])
            seen["ta_buf"] = [b.clone() for b in e.ta_state_.model.buffers()]
            seen["losses"] = losses

    est.partial_fit(*_task([2, 3], 4, 1), on_step=hook)
    return frozen, frozen_buf, prev, ta_model, ta_buf, seen


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def test_frozen_parts_are_bit_stable_after_a_step():
    frozen, frozen_buf, prev, ta_model, _, seen = _freeze_run()
    assert "trans" in seen["losses"] and "ta_predict" in seen["losses"]
    assert _same(frozen, seen["frozen"]) and _same(frozen_buf, seen["frozen_buf"])
    assert _same(prev, seen["prev"])
    assert not _same(ta_model, seen["ta"])            # the trained side did move


def test_zero_ta_weight_leaves_ta_model_untouched():
    _, _, _, ta_model, ta_buf, seen = _freeze_run(lambda_ta=0.0)
    assert "mcls" in seen["losses"] and "trans" in seen["losses"]
    assert _same(ta_model, seen["ta"]) and _same(ta_buf, seen["ta_buf"])


# ---------------------------------------------------------------- api

def test_predict_and_proba_shapes():
    est = TagFexClassifier(epochs=1, **SMALL).partial_fit(*_task([5, 9]))
    X, _ = _task([5, 9], 2, 4)
    assert set(est.predict(X)) <= {5, 9}
    proba = est.predict_proba(X)
    assert proba.shape == (4, 2) and np.allclose(proba.sum(1), 1)
    assert est.transform(X).shape == (4, 8)
    est.partial_fit(*_task([1], 4, 2))
    assert est.classes_.tolist() == [5, 9, 1] and est.n_tasks_ == 2
    assert [f.shape[1] for f in est.extractor_features(X)] == [8, 8]
    assert est.param_counts_[1] > est.param_counts_[0]


def test_partial_fit_rejects_seen_classes_and_shape_change():
    est = TagFexClassifier(epochs=0, **SMALL).partial_fit(*_task([0, 1]))
    with pytest.raises(ValueError, match="unseen"):
        est.partial_fit(*_task([1, 2]))
    with pytest.raises(ValueError, match="shape"):
        est.partial_fit(*_task([3], size=12))


@pytest.mark.parametrize("bad", [dict(mcls_support="old"), dict(augment="nope"),
                                 dict(prune_rate=1.5), dict(lr=-1.0), dict(dtype="half")])
def test_invalid_params_rejected(bad):
    with pytest.raises(ValueError):
        TagFexClassifier(**{**SMALL, **bad}).partial_fit(*_task([0, 1]))


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        TagFexClassifier().predict(np.zeros((1, 8, 8, 3)))


def test_fit_resets_state_and_clone_keeps_params():
    est = TagFexClassifier(epochs=0, **SMALL)
    est.partial_fit(*_task([0, 1])).partial_fit(*_task([2]))
    est.fit(*_task([4, 5]))
    assert est.n_tasks_ == 1 and est.classes_.tolist() == [4, 5]
    twin = clone(est)
    assert twin.get_params() == est.get_params() and not hasattr(twin, "classes_")


def test_same_seed_same_model():
    a = TagFexClassifier(epochs=1, random_state=2, **SMALL).partial_fit(*_task([0, 1]))
    b = TagFexClassifier(epochs=1, random_state=2, **SMALL).partial_fit(*_task([0, 1]))
    X, _ = _task([0], 3, 9)
    assert np.array_equal(a.decision_function(X), b.decision_function(X))


def test_prune_rate_shrinks_frozen_extractor():
    est = TagFexClassifier(epochs=0, prune_rate=0.4, **{**SMALL, "channels": (16, 32)})
    est.partial_fit(*_task([0, 1])).partial_fit(*_task([2, 3]))
    assert len(est.pruning_plans_) == 1
    assert est.model_set_.feature_dims[0] < 32 == est.model_set_.feature_dims[1]
    assert est.predict(_task([0], 2)[0]).shape == (2,)
