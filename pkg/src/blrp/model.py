"""End-to-end bidirectional latent-recurrent classifier.

Data flow for one sequence of N tokens:

1. ``segment``: embed tokens, add per-position (within segment) embeddings,
   split into T = ceil(N / t) segments of t rows, padding the last one.
2. ``make_l_init`` per active direction.
3. ``forward_pass`` left to right, then ``backward_pass`` right to left.
4. ``classify`` the final latent block (last backward state, or last forward
   state for forward-only runs).

Everything accepts an optional leading batch axis; samples in a batch must
share T (see :func:`blrp.train.bucket_batches`).
"""
from dataclasses import asdict, dataclass, field, replace
import numpy as np

from . import tensor as T
from .attention import AttentionParams, theta_cross_l, theta_cross_x, theta_self, xavier_uniform
from .errors import ConfigError, SequencingError, VocabularyError
from .latent import (Direction, InitVariant, ProjectionSharing, init_latent_params,
                     make_l_init)


@dataclass
class ModelConfig:
    vocab_size: int = 17
    d: int = 64
    h_ff: int = 128
    heads: int = 8
    t: int = 100
    l: int = 100
    self_layers: int = 2
    classes: int = 10
    direction: Direction = Direction.BIDIRECTIONAL
    fwd_init: InitVariant = InitVariant.DYN_PROJ_RESIDUAL
    bwd_init: InitVariant = InitVariant.DYN_PROJ_RESIDUAL
    sharing: ProjectionSharing = ProjectionSharing.SEPARATE
    seed: int = 0

    def __post_init__(self):
        self.direction = Direction(self.direction)
        self.sharing = ProjectionSharing(self.sharing)
        self.fwd_init = None if self.fwd_init in (None, "", "none") else InitVariant(self.fwd_init)
        self.bwd_init = None if self.bwd_init in (None, "", "none") else InitVariant(self.bwd_init)
        if not self.direction.has_forward:
            self.fwd_init = None
        if not self.direction.has_backward:
            self.bwd_init = None
        self.validate()

    def validate(self):
        for name in ("vocab_size", "d", "h_ff", "heads", "t", "l", "self_layers", "classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.direction.has_forward and self.fwd_init is None:
            raise ConfigError("forward pass enabled but fwd_init is missing")
        if self.direction.has_backward and self.bwd_init is None:
            raise ConfigError("backward pass enabled but bwd_init is missing")

    def init_for(self, direction):
        return self.fwd_init if direction is Direction.FORWARD else self.bwd_init

    def to_dict(self):
        out = asdict(self)
        for k in ("direction", "fwd_init", "bwd_init", "sharing"):
            v = getattr(self, k)
            out[k] = None if v is None else v.value
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)


# Table presets: embedding size, hidden (feed-forward) size, heads, segment size.
# Latent size follows segment size, the best-performing pairing.
PRESETS = {
    "listops": dict(d=64, h_ff=128, heads=8, t=100, l=100),
    "text": dict(d=256, h_ff=256, heads=4, t=10, l=10),
    "retrieval": dict(d=256, h_ff=736, heads=4, t=100, l=100),
    "cifar10": dict(d=368, h_ff=736, heads=6, t=10, l=10),
    "cifar100": dict(d=368, h_ff=736, heads=6, t=10, l=10, classes=100),
    # desk-scale ListOps: same widths, shorter segments for length <= 256
    "listops-desk": dict(d=64, h_ff=128, heads=8, t=16, l=16),
    # gradient-check toy
    "toy": dict(d=8, h_ff=16, heads=2, t=4, l=4),
}
PRESET_BATCH = {"listops": 32, "text": 24, "retrieval": 24, "cifar10": 128, "cifar100": 64,
                "listops-desk": 32, "toy": 4}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def param_count(cfg):
    """Closed-form scalar parameter count.

        vocab*d + t*d                                   token + position tables
      + self_layers * S + 2 * C                         attention blocks (shared by both passes)
      + init tables (l*d each) / projection bases (d*l each)
      + d*h_ff + h_ff + h_ff*classes + classes          MLP head

    with S = 4d^2 + 2*d*h_ff + h_ff + 5d (self block: q,k,v,o, FFN + biases,
    two layer norms) and C = S + 2d (cross block adds a key/value norm).
    Projection bases: one when both directions project and sharing is
    shared/siamese, otherwise one per projecting direction.
    """
    d, h = cfg.d, cfg.h_ff
    s_block = 4 * d * d + 2 * d * h + h + 5 * d
    c_block = s_block + 2 * d
    total = cfg.vocab_size * d + cfg.t * d
    total += cfg.self_layers * s_block + 2 * c_block
    inits = [v for v in (cfg.fwd_init, cfg.bwd_init) if v is not None]
    n_pos = sum(1 for v in inits if v is InitVariant.POS_EMB_1D)
    n_proj = len(inits) - n_pos
    if n_proj == 2 and cfg.sharing is not ProjectionSharing.SEPARATE:
        n_proj = 1
    total += (n_pos + n_proj) * cfg.l * d
    total += d * h + h + h * cfg.classes + cfg.classes
    return total


@dataclass
class DirectionParams:
    self_layers: list
    cross_x: AttentionParams
    cross_l: AttentionParams


@dataclass
class SegmentedSequence:
    """Embedded, padded segments.

    ``segments[i]`` is [..., t, d]; ``masks[i]`` is the matching boolean
    [..., t] validity mask; ``lengths`` holds the unpadded token counts.
    """
    segments: list
    masks: list
    lengths: np.ndarray

    @property
    def T(self):
        return len(self.segments)

    def full(self):
        """The whole padded sequence [..., T*t, d] and its mask."""
        x = self.segments[0] if self.T == 1 else T.concat_rows(self.segments)
        return x, np.concatenate(self.masks, axis=-1)


@dataclass
class LatentTrace:
    l_init_f: object = None
    l_init_b: object = None
    l_fwd: list = field(default_factory=list)
    l_bwd: list = field(default_factory=list)  # indexed by segment: l_bwd[0] is the first segment
    x_fwd: list = field(default_factory=list)
    x_bwd: list = field(default_factory=list)
    l_final: object = None
    # key-row counts of each latent update, in execution order
    key_sizes_f: list = field(default_factory=list)
    key_sizes_b: list = field(default_factory=list)


def _self_stack(x, layers, mask):
    for p in layers:
        x = theta_self(x, p, mask)
    return x


def _ones(mask_like, n):
    return np.ones(mask_like.shape[:-1] + (n,), dtype=np.bool_)


def encode_segments(seq, dp):
    """Self-attention stack applied to every segment independently."""
    return [_self_stack(x, dp.self_layers, m) for x, m in zip(seq.segments, seq.masks)]


def forward_pass(seq, l_init, dp, variant, local=None):
    """Left-to-right sweep. Returns (x_fwd, l_fwd, key_sizes).

    ``local`` may carry precomputed :func:`encode_segments` output.
    """
    residual = InitVariant(variant).residual
    if local is None:
        local = encode_segments(seq, dp)
    x_fwd, l_fwd, sizes = [], [], []
    prev = l_init
    for i in range(seq.T):
        m = seq.masks[i]
        x_i = theta_cross_x(local[i], prev, dp.cross_x)
        if i > 0 and residual:
            keys = T.concat_rows([x_i, l_init])
            kmask = np.concatenate([m, _ones(m, l_init.shape[-2])], axis=-1)
        else:
            keys, kmask = x_i, m
        l_i = theta_cross_l(prev, keys, dp.cross_l, kmask)
        if residual:
            l_i = T.add(l_i, l_init)
        sizes.append(keys.shape[-2])
        x_fwd.append(x_i)
        l_fwd.append(l_i)
        prev = l_i
    return x_fwd, l_fwd, sizes


def backward_pass(seq, l_init_b, dp, variant, l_fwd=None, x_fwd=None, bidirectional=True,
                  local=None):
    """Right-to-left sweep. Returns (x_bwd, l_bwd, key_sizes), lists indexed by segment.

    Bidirectional runs start from the last forward state and include the
    forward segment encodings in every key union. Backward-only runs start
    from ``l_init_b`` and drop the forward terms.
    """
    residual = InitVariant(variant).residual
    n = seq.T
    if bidirectional and (l_fwd is None or x_fwd is None or len(l_fwd) != n or len(x_fwd) != n):
        raise SequencingError("bidirectional backward pass needs the complete forward trace")
    if local is None:
        local = encode_segments(seq, dp)
    x_bwd, l_bwd, sizes = [None] * n, [None] * n, []
    prev = None
    for i in range(n - 1, -1, -1):
        m = seq.masks[i]
        last = i == n - 1
        x_i = theta_cross_x(local[i], l_init_b if last else prev, dp.cross_x)
        parts = [x_fwd[i], x_i] if bidirectional else [x_i]
        masks = [m] * len(parts)
        if not last and residual:
            parts.append(l_init_b)
            masks.append(_ones(m, l_init_b.shape[-2]))
        keys = parts[0] if len(parts) == 1 else T.concat_rows(parts)
        kmask = np.concatenate(masks, axis=-1)
        if last:
            query = l_fwd[-1] if bidirectional else l_init_b
        else:
            query = prev
        l_i = theta_cross_l(query, keys, dp.cross_l, kmask)
        if residual:
            l_i = T.add(l_i, l_init_b)
        sizes.append(keys.shape[-2])
        x_bwd[i] = x_i
        l_bwd[i] = l_i
        prev = l_i
    return x_bwd, l_bwd, sizes


def classify(l_final, head):
    """Mean-pool latent rows, then a two-layer GELU MLP. Returns [..., 1, classes] logits."""
    pooled = T.mean_rows(l_final)
    hidden = T.gelu(T.add(T.matmul(pooled, head["head.w1"]), head["head.b1"]))
    return T.add(T.matmul(hidden, head["head.w2"]), head["head.b2"])


class BLRPModel:
    def __init__(self, cfg):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        p = {}
        p["embed.tokens"] = T.Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.d)), requires_grad=True)
        p["embed.pos"] = T.Tensor(rng.normal(0.0, 0.02, size=(cfg.t, cfg.d)), requires_grad=True)
        p.update(init_latent_params(cfg, rng))
        # one set of attention operators, shared by both passes
        self.blocks = DirectionParams(
            self_layers=[AttentionParams.init(cfg.d, cfg.h_ff, cfg.heads, rng)
                         for _ in range(cfg.self_layers)],
            cross_x=AttentionParams.init(cfg.d, cfg.h_ff, cfg.heads, rng, cross=True),
            cross_l=AttentionParams.init(cfg.d, cfg.h_ff, cfg.heads, rng, cross=True),
        )
        for k, blk in enumerate(self.blocks.self_layers):
            for name, t in blk.named():
                p[f"self{k}.{name}"] = t
        for name, t in self.blocks.cross_x.named():
            p[f"cross_x.{name}"] = t
        for name, t in self.blocks.cross_l.named():
            p[f"cross_l.{name}"] = t
        p["head.w1"] = T.Tensor(xavier_uniform(rng, cfg.d, cfg.h_ff), requires_grad=True)
        p["head.b1"] = T.Tensor(np.zeros(cfg.h_ff), requires_grad=True)
        # output layer at 0.1x Xavier scale so fresh-model logits are near uniform
        p["head.w2"] = T.Tensor(0.1 * xavier_uniform(rng, cfg.h_ff, cfg.classes), requires_grad=True)
        p["head.b2"] = T.Tensor(np.zeros(cfg.classes), requires_grad=True)
        self.params = p

    # -- parameters ---------------------------------------------------------

    def num_params(self):
        return sum(t.size for t in self.params.values())

    def state_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays):
        for k, t in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ConfigError(f"parameter {k}: shape {a.shape} != {t.shape}")
            t.data[...] = a

    # -- pipeline -----------------------------------------------------------

    def _check_ids(self, ids):
        ids = np.asarray(ids)
        if ids.size == 0:
            raise VocabularyError("empty token sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            bad = ids[(ids < 0) | (ids >= self.cfg.vocab_size)][0]
            raise VocabularyError(f"token id {bad} outside vocabulary of size {self.cfg.vocab_size}")

    def segment(self, tokens):
        """Embed and split one sequence; tensors are unbatched ([t, d])."""
        seq = self.segment_batch([tokens])
        return SegmentedSequence(
            segments=[T.squeeze_batch(s) for s in seq.segments],
            masks=[m[0] for m in seq.masks],
            lengths=seq.lengths,
        )

    def segment_batch(self, batch):
        """Embed and split a batch of sequences that share the same segment count."""
        t = self.cfg.t
        lengths = np.array([len(s) for s in batch], dtype=np.int64)
        if (lengths < 1).any():
            raise VocabularyError("empty token sequence")
        counts = -(-lengths // t)
        if (counts != counts[0]).any():
            raise ConfigError(f"batch mixes segment counts {sorted(set(counts.tolist()))}")
        n_seg = int(counts[0])
        ids = np.zeros((len(batch), n_seg * t), dtype=np.int64)
        for b, s in enumerate(batch):
            self._check_ids(s)
            ids[b, :len(s)] = s
        valid = np.arange(n_seg * t)[None, :] < lengths[:, None]
        table, pos = self.params["embed.tokens"], self.params["embed.pos"]
        segments, masks = [], []
        for i in range(n_seg):
            emb = T.embedding(table, ids[:, i * t:(i + 1) * t])
            segments.append(T.add(emb, pos))
            masks.append(valid[:, i * t:(i + 1) * t])
        return SegmentedSequence(segments, masks, lengths)

    def trace(self, seq):
        """Run both passes over a segmented sequence and return every state."""
        cfg = self.cfg
        tr = LatentTrace()
        x_all = valid = None
        if any(v is not None and v.uses_projection for v in (cfg.fwd_init, cfg.bwd_init)):
            x_all, valid = seq.full()
        ref = seq.segments[0]
        local = encode_segments(seq, self.blocks)
        if cfg.direction.has_forward:
            tr.l_init_f = make_l_init(x_all if x_all is not None else ref, valid, cfg.fwd_init,
                                      Direction.FORWARD, self.params, cfg)
            tr.x_fwd, tr.l_fwd, tr.key_sizes_f = forward_pass(
                seq, tr.l_init_f, self.blocks, cfg.fwd_init, local=local)
        if cfg.direction.has_backward:
            if (cfg.sharing is ProjectionSharing.SHARED_SINGLE and tr.l_init_f is not None
                    and cfg.fwd_init.uses_projection and cfg.bwd_init.uses_projection):
                tr.l_init_b = tr.l_init_f
            else:
                tr.l_init_b = make_l_init(x_all if x_all is not None else ref, valid, cfg.bwd_init,
                                          Direction.BACKWARD, self.params, cfg)
            bidir = cfg.direction is Direction.BIDIRECTIONAL
            tr.x_bwd, tr.l_bwd, tr.key_sizes_b = backward_pass(
                seq, tr.l_init_b, self.blocks, cfg.bwd_init,
                l_fwd=tr.l_fwd if bidir else None, x_fwd=tr.x_fwd if bidir else None,
                bidirectional=bidir, local=local)
            tr.l_final = tr.l_bwd[0]
        else:
            tr.l_final = tr.l_fwd[-1]
        return tr

    def logits_from_segments(self, seq):
        return classify(self.trace(seq).l_final, self.params)

    def logits(self, tokens):
        """Logits for one token sequence, as a plain [classes] array (no tape needed)."""
        return self.logits_from_segments(self.segment(tokens)).data.reshape(-1)

    def batch_logits(self, batch):
        """[B, 1, classes] logit tensor for a same-segment-count batch."""
        return self.logits_from_segments(self.segment_batch(batch))

