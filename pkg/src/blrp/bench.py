"""Peak tracked tensor memory and time of one forward+backward pass versus sequence length.

The naive reference is one single-head self-attention block over the whole
sequence, so its score matrix grows with the square of the length.
"""
import time

import numpy as np

from . import tensor as T
from .attention import AttentionParams, theta_self
from .errors import ConfigError
from .model import BLRPModel

BENCH_HEADER = ("length", "method", "peak_bytes", "seconds_per_seq")
SKIPPED = "skipped"
DEFAULT_LENGTHS = (512, 1024, 2048, 4096)


def _measure(run):
    base = T.TRACKER.live
    T.TRACKER.reset_peak()
    t0 = time.perf_counter()
    run()
    secs = time.perf_counter() - t0
    return T.TRACKER.peak - base, secs


def blrp_step(model, tokens):
    with T.Tape() as tape:
        loss = T.cross_entropy(model.batch_logits([tokens]), [0])
    tape.backward(loss, model.params)


def naive_step(model, block, tokens):
    with T.Tape() as tape:
        x = T.embedding(model.params["embed.tokens"], np.asarray(tokens)[None, :])
        y = theta_self(x, block)
        loss = T.total(T.mean_rows(y))
    tape.backward(loss, [model.params["embed.tokens"]] + [t for _, t in block.named()])


def run_bench(lengths, cfg, naive_cap=4096, seed=0, timing=False):
    """Rows of (length, method, peak_bytes, seconds_per_seq) for each length.

    Lengths above ``naive_cap`` get a ``skipped`` marker in the naive row.
    """
    lengths = list(lengths)
    if not lengths or lengths != sorted(lengths) or lengths[0] < 1:
        raise ConfigError(f"lengths must be positive and ascending, got {lengths}")
    model = BLRPModel(cfg)
    rng = np.random.default_rng(seed)
    block = AttentionParams.init(cfg.d, cfg.h_ff, 1, rng)
    rows = []
    for n in lengths:
        tokens = rng.integers(1, cfg.vocab_size, size=n).tolist()
        peak, secs = _measure(lambda: blrp_step(model, tokens))
        rows.append([n, "blrp", peak, f"{secs:.4f}" if timing else ""])
        if n > naive_cap:
            rows.append([n, "naive", SKIPPED, SKIPPED])
        else:
            peak, secs = _measure(lambda: naive_step(model, block, tokens))
            rows.append([n, "naive", peak, f"{secs:.4f}" if timing else ""])
    return rows


def growth_ratios(rows, method):
    """Peak-bytes ratio between successive measured lengths for ``method``."""
    vals = [(r[0], r[2]) for r in rows if r[1] == method and r[2] != SKIPPED]
    return [(b[0], b[1] / a[1]) for a, b in zip(vals, vals[1:])]
