"""AdamW training, evaluation and metrics output."""
from dataclasses import asdict, dataclass, field
import csv
import io
import math
import os
import time

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import read_jsonl
from .errors import CheckpointError, ConfigError, EmptySequenceError, NonFiniteGradientError
from .model import BLRPModel, ModelConfig

CSV_HEADER = ("epoch", "split", "loss", "accuracy", "lr", "seconds")


@dataclass
class OptimConfig:
    lr0: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    gamma: float = 0.8
    weight_decay: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    # "exponential": lr0 * gamma**epoch; "linear": lr0 * (1 - epoch/epochs)
    schedule: str = "exponential"

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.schedule not in ("exponential", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")


def lr_at(epoch, cfg):
    if cfg.schedule == "linear":
        return cfg.lr0 * max(0.0, 1.0 - epoch / cfg.epochs)
    return cfg.lr0 * cfg.gamma ** epoch


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_accuracy: float = -1.0
    best_epoch: int = -1

    @classmethod
    def for_params(cls, params):
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})

    def tensors(self):
        out = {}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def meta(self):
        return {"step": self.step, "best_accuracy": self.best_accuracy, "best_epoch": self.best_epoch}

    @classmethod
    def from_checkpoint(cls, tensors, meta):
        st = cls(step=meta.get("step", 0), best_accuracy=meta.get("best_accuracy", -1.0),
                 best_epoch=meta.get("best_epoch", -1))
        for k, a in tensors.items():
            if k.startswith("adam.m/"):
                st.m[k[7:]] = a.copy()
            elif k.startswith("adam.v/"):
                st.v[k[7:]] = a.copy()
        return st


def adamw_step(params, grads, state, cfg, lr=None):
    """One decoupled-weight-decay Adam update, applied in place to ``params``."""
    lr = cfg.lr0 if lr is None else lr
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.shape:
            raise ConfigError(f"optimizer state for {name!r} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w = p.data
        if cfg.weight_decay:
            w *= 1.0 - lr * cfg.weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def bucket_batches(samples, t, batch_size, rng=None):
    """Index batches whose members share a segment count, optionally shuffled."""
    by_count = {}
    for i, s in enumerate(samples):
        by_count.setdefault(-(-len(s.tokens) // t), []).append(i)
    batches = []
    for count in sorted(by_count):
        idx = np.array(by_count[count])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def batch_loss(model, samples):
    """Mean cross-entropy over ``samples`` (one shared segment count) and the logits."""
    logits = model.batch_logits([s.tokens for s in samples])
    labels = np.array([s.label for s in samples])
    return T.cross_entropy(logits, labels), logits.data.reshape(len(samples), -1)


def loss_and_grads(model, samples):
    with T.Tape() as tape:
        loss, logits = batch_loss(model, samples)
    grads = tape.backward(loss, model.params)
    return loss.item(), logits, grads


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    predictions: np.ndarray
    # (lo, hi, count, accuracy) per sequence-length decile bucket
    buckets: list


def length_buckets(lengths, correct, n=10):
    """Accuracy per sequence-length decile: cut points sit at every n-th rank of
    the sorted lengths, and equal lengths always share a bucket."""
    lengths = np.asarray(lengths)
    correct = np.asarray(correct, dtype=np.float64)
    ranked = np.sort(lengths)
    cuts = ranked[[(k * len(ranked)) // n for k in range(1, n)]]
    which = np.searchsorted(cuts, lengths, side="right")
    rows = []
    for b in range(n):
        sel = which == b
        if not sel.any():
            continue
        rows.append((int(lengths[sel].min()), int(lengths[sel].max()), int(sel.sum()),
                     float(correct[sel].mean())))
    return rows


def evaluate_samples(model, samples, batch_size=64):
    if not samples:
        raise EmptySequenceError("no samples to evaluate")
    labels = np.array([s.label for s in samples])
    losses = np.zeros(len(samples))
    preds = np.zeros(len(samples), dtype=np.int64)
    for idx in bucket_batches(samples, model.cfg.t, batch_size):
        lg = model.batch_logits([samples[i].tokens for i in idx]).data.reshape(len(idx), -1)
        z = lg - lg.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        losses[idx] = lse - z[np.arange(len(idx)), labels[idx]]
        preds[idx] = lg.argmax(axis=1)
    correct = preds == labels
    return EvalResult(
        loss=float(losses.mean()),
        accuracy=float(correct.mean()),
        predictions=preds,
        buckets=length_buckets([len(s.tokens) for s in samples], correct),
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_csv(path, header, rows):
    """Write the whole table to a temp file and rename over ``path``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def save_model(path, model, state=None, optim=None, epoch=None):
    tensors = dict(model.state_arrays())
    meta = {"epoch": epoch}
    if state is not None:
        tensors.update(state.tensors())
        meta.update(state.meta())
    if optim is not None:
        meta["optim"] = asdict(optim)
    checkpoint.save(path, model.cfg.to_dict(), tensors, meta)


def load_model(path):
    """Returns (model, tensors, meta) from a checkpoint file."""
    cfg_dict, tensors, meta = checkpoint.load(path)
    try:
        cfg = ModelConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad model config ({e})") from None
    model = BLRPModel(cfg)
    missing = [k for k in model.params if k not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:3]}")
    try:
        model.load_arrays(tensors)
    except ConfigError as e:
        raise CheckpointError(f"{path}: {e}") from None
    return model, tensors, meta


@dataclass
class TrainResult:
    rows: list
    best_epoch: int
    best_accuracy: float
    final_val: EvalResult
    seconds: float
    metrics_path: str = None
    checkpoint_path: str = None
    best_path: str = None


def train(model_cfg, optim_cfg, train_path, val_path, out_dir, timing=False, log=None,
          until=None, train_samples=None, val_samples=None):
    """Train from JSONL files; writes ``metrics.csv``, ``model.ckpt`` (final) and
    ``best.ckpt`` (best validation accuracy) into ``out_dir``.

    With ``timing`` off the ``seconds`` column is left empty so that repeated
    runs produce identical files. ``until(epoch, val_result)`` returning true
    ends training after that epoch.
    """
    if train_samples is None:
        train_samples = _read(train_path, model_cfg)
    if val_samples is None:
        val_samples = _read(val_path, model_cfg)
    if not train_samples or not val_samples:
        raise EmptySequenceError("training needs non-empty train and validation sets")
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")

    model = BLRPModel(model_cfg)
    state = TrainState.for_params(model.params)
    rng = np.random.default_rng(model_cfg.seed + 1)
    rows = []
    val = None
    start = time.perf_counter()
    for epoch in range(optim_cfg.epochs):
        lr = lr_at(epoch, optim_cfg)
        t0 = time.perf_counter()
        loss_sum = 0.0
        hits = 0
        for idx in bucket_batches(train_samples, model_cfg.t, optim_cfg.batch_size, rng):
            batch = [train_samples[i] for i in idx]
            loss, logits, grads = loss_and_grads(model, batch)
            loss_sum += loss * len(idx)
            hits += int((logits.argmax(axis=1) == np.array([s.label for s in batch])).sum())
            adamw_step(model.params, grads, state, optim_cfg, lr)
        t_train = time.perf_counter() - t0
        t0 = time.perf_counter()
        val = evaluate_samples(model, val_samples)
        t_val = time.perf_counter() - t0
        n = len(train_samples)
        rows.append([epoch, "train", _fmt(loss_sum / n), _fmt(hits / n), _fmt(lr),
                     f"{t_train:.3f}" if timing else ""])
        rows.append([epoch, "val", _fmt(val.loss), _fmt(val.accuracy), _fmt(lr),
                     f"{t_val:.3f}" if timing else ""])
        write_csv(metrics_path, CSV_HEADER, rows)
        if val.accuracy > state.best_accuracy:
            state.best_accuracy = val.accuracy
            state.best_epoch = epoch
            save_model(best_path, model, state, optim_cfg, epoch)
        if log:
            log(f"epoch {epoch}: train loss {loss_sum / n:.4f} acc {hits / n:.4f} | "
                f"val loss {val.loss:.4f} acc {val.accuracy:.4f} | lr {lr:.3g} | {t_train + t_val:.1f}s")
        if until is not None and until(epoch, val):
            break
    save_model(ckpt_path, model, state, optim_cfg, epoch)
    return TrainResult(rows=rows, best_epoch=state.best_epoch, best_accuracy=state.best_accuracy,
                       final_val=val, seconds=time.perf_counter() - start,
                       metrics_path=metrics_path, checkpoint_path=ckpt_path, best_path=best_path)


def _read(path, cfg):
    try:
        return read_jsonl(path, classes=cfg.classes, vocab_size=cfg.vocab_size)
    except OSError as e:
        raise OSError(f"cannot read dataset {path}: {e.strerror or e}") from e


def evaluate(checkpoint_path, dataset_path, expect=None, batch_size=64):
    """Score a checkpoint on a JSONL dataset.

    ``expect`` optionally maps config fields (e.g. ``d``, ``vocab_size``) to
    the values the caller assumes; any disagreement is a checkpoint error.
    """
    model, _, _ = load_model(checkpoint_path)
    for k, v in (expect or {}).items():
        have = getattr(model.cfg, k)
        have = getattr(have, "value", have)
        if have != v:
            raise CheckpointError(f"checkpoint has {k}={have!r}, expected {v!r}")
    samples = _read(dataset_path, model.cfg)
    return evaluate_samples(model, samples, batch_size)


def majority_accuracy(samples, classes):
    counts = np.bincount([s.label for s in samples], minlength=classes)
    return float(counts.max() / max(1, len(samples)))


def expected_initial_loss(classes):
    return math.log(classes)
