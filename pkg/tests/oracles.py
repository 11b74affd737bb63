"""Independent reference computations used as test oracles."""

import numpy as np
import torch
from torch.nn import functional as F

from tagfex.estimator import component_seed
from tagfex.model_core import (AuxiliaryClassifier, build_backbone, expand_classifier,
                               torch_seed)


def herding_oracle(features, m):
    """Greedy herding straight from its definition: try every candidate at every step."""
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    chosen = []
    for k in range(1, m + 1):
        best, best_dist = None, None
        for i in range(len(features)):
            if i in chosen:
                continue
            mean = (features[i] + sum((features[j] for j in chosen), np.zeros_like(mu))) / k
            dist = float(np.sqrt(((mu - mean) ** 2).sum()))
            if best is None or dist < best_dist:
                best, best_dist = i, dist
        chosen.append(best)
    return chosen


def infonce_loop(z, z_prime, temperature):
    """Pairwise InfoNCE evaluated with Python floats, one term at a time."""
    import math

    z = [list(map(float, row)) for row in z]
    zp = [list(map(float, row)) for row in z_prime]

    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        return sum(x * y for x, y in zip(a, b)) / (na * nb)

    total = 0.0
    for i in range(len(z)):
        num = math.exp(cos(z[i], zp[i]) / temperature)
        den = sum(math.exp(cos(z[i], zp[j]) / temperature) for j in range(len(z)) if j != i)
        total += math.log(num / den)
    return total / len(z)


def central_difference(fn, params, step=1e-4):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of each tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def rel_err(a, b, floor=1e-8):
    a = torch.as_tensor(a, dtype=torch.float64).detach()
    b = torch.as_tensor(b, dtype=torch.float64).detach()
    return float((a - b).abs().max() / max(a.abs().max().item(), b.abs().max().item(), floor))


def attention_loop(z_ts, z_ta, Wq, Wk_ts, Wv_ts, Wk_ta, Wv_ta, heads):
    """Merged tokens and head-averaged attention, one query and head at a time.

    Inputs are already layer-normalised (N, d) token lists; weights map
    row vectors as ``x @ W.T``.
    """
    import math

    z_ts = np.asarray(z_ts, np.float64)
    z_ta = np.asarray(z_ta, np.float64)
    d = z_ts.shape[1]
    dh = d // heads
    q = z_ts @ Wq.T
    keys = np.concatenate([z_ts @ Wk_ts.T, z_ta @ Wk_ta.T])
    vals = np.concatenate([z_ts @ Wv_ts.T, z_ta @ Wv_ta.T])
    out = np.zeros((len(z_ts), d))
    attn = np.zeros((len(z_ts), len(keys)))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(len(z_ts)):
            logits = [float(q[i, cols] @ keys[j, cols]) / math.sqrt(d / heads)
                      for j in range(len(keys))]
            mx = max(logits)
            w = [math.exp(v - mx) for v in logits]
            s = sum(w)
            w = [v / s for v in w]
            for j in range(len(keys)):
                out[i, cols] += w[j] * vals[j, cols]
                attn[i, j] += w[j] / heads
    return out, attn


class HandWiredDER:
    """Expansion with a cross-entropy and an auxiliary head, nothing else."""

    def __init__(self, spec, lr, momentum, weight_decay, random_state):
        self.spec, self.lr, self.momentum, self.wd = spec, lr, momentum, weight_decay
        self.rs = random_state
        self.extractors, self.classifier, self.aux = [], None, None
        self.sizes = []

    def begin(self, task, n_new):
        seed = component_seed(self.rs, task, "task_specific")
        for e in self.extractors:
            for p in e.parameters():
                p.requires_grad_(False)
        with torch_seed(seed):
            self.extractors.append(build_backbone(self.spec))
        self.classifier = expand_classifier(self.classifier, n_new, self.extractors[-1].out_dim)
        self.aux = None
        if task > 0:
            with torch_seed(seed + 1):
                self.aux = AuxiliaryClassifier(self.extractors[-1].out_dim, n_new)
        self.known = sum(self.sizes)
        self.sizes.append(n_new)
        params = list(self.extractors[-1].parameters()) + list(self.classifier.parameters())
        if self.aux is not None:
            params += list(self.aux.parameters())
        self.opt = torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                                   weight_decay=self.wd)

    def step(self, x, y):
        for e in self.extractors[:-1]:
            e.eval()
        cur = self.extractors[-1].train()
        with torch.no_grad():
            old = [e(x)["features"] for e in self.extractors[:-1]]
        new = cur(x)["features"]
        loss = F.cross_entropy(self.classifier(torch.cat(old + [new], 1)), y)
        if self.aux is not None:
            aux_y = torch.where(y < self.known, torch.zeros_like(y), y - self.known + 1)
            loss = loss + F.cross_entropy(self.aux(new), aux_y)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()

    def modules(self):
        return [self.extractors[-1], self.classifier] + ([self.aux] if self.aux else [])
