"""Central finite-difference checks of tape gradients."""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .latent import Direction, InitVariant
from .model import BLRPModel, ModelConfig, PRESETS


def relative_error(analytic, numeric, floor=1e-10):
    """max |a - n| scaled by the larger of the two max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def numeric_grad(loss_fn, array, h, entries=None):
    """Central differences of scalar ``loss_fn()`` w.r.t. ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    out = np.zeros(len(entries))
    for j, i in enumerate(entries):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        out[j] = (up - down) / (2.0 * h)
    return out


def toy_config(**overrides):
    kw = dict(PRESETS["toy"], direction=Direction.BIDIRECTIONAL,
              fwd_init=InitVariant.DYN_PROJ_RESIDUAL, bwd_init=InitVariant.DYN_PROJ_RESIDUAL,
              seed=0)
    kw.update(overrides)
    return ModelConfig(**kw)


def toy_batch(cfg, segments=3, seed=0):
    """Two sequences that both span ``segments`` segments, with padding in the last one."""
    rng = np.random.default_rng(seed)
    lo = (segments - 1) * cfg.t + 1
    lengths = sorted({max(lo, segments * cfg.t - 2), lo})
    tokens = [rng.integers(1, cfg.vocab_size, size=n).tolist() for n in lengths]
    labels = rng.integers(0, cfg.classes, size=len(tokens))
    return tokens, labels


@dataclass
class GradReport:
    name: str
    shape: tuple
    checked: int
    rel_error: float
    passed: bool


def check_model(model, tokens, labels, h=1e-3, tol=1e-3, max_entries=None, seed=0):
    """Compare tape gradients of the batch loss with central differences for every parameter."""
    with T.Tape() as tape:
        loss = T.cross_entropy(model.batch_logits(tokens), labels)
    grads = tape.backward(loss, model.params)

    def loss_fn():
        return T.cross_entropy(model.batch_logits(tokens), labels).item()

    rng = np.random.default_rng(seed)
    reports = []
    for name, p in model.params.items():
        size = p.size
        if max_entries is not None and size > max_entries:
            entries = np.sort(rng.choice(size, size=max_entries, replace=False)).tolist()
        else:
            entries = None
        num = numeric_grad(loss_fn, p.data, h, entries)
        ana = grads[name].reshape(-1)
        if entries is not None:
            ana = ana[entries]
        err = relative_error(ana, num)
        reports.append(GradReport(name, p.shape, len(num), err, bool(err < tol)))
    return reports


def run_toy(h=1e-3, tol=1e-3, max_entries=None, **overrides):
    cfg = toy_config(**overrides)
    model = BLRPModel(cfg)
    tokens, labels = toy_batch(cfg)
    return check_model(model, tokens, labels, h=h, tol=tol, max_entries=max_entries)
