"""Initial latent block construction: learned tables or a dynamic projection of the input."""
from enum import Enum

import numpy as np

from . import tensor as T
from .attention import xavier_uniform
from .errors import ConfigError, EmptySequenceError


class InitVariant(str, Enum):
    POS_EMB_1D = "1DPosEmb"
    DYN_PROJ_INIT_ONLY = "dynproj_init"
    DYN_PROJ_RESIDUAL = "dynproj"

    @property
    def uses_projection(self):
        return self is not InitVariant.POS_EMB_1D

    @property
    def residual(self):
        """Whether the initial block joins later key unions and is added to every latent update."""
        return self is InitVariant.DYN_PROJ_RESIDUAL


class ProjectionSharing(str, Enum):
    SHARED_SINGLE = "shared"
    SIAMESE = "siamese"
    SEPARATE = "separate"


class Direction(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    BIDIRECTIONAL = "bidirectional"

    @property
    def has_forward(self):
        return self is not Direction.BACKWARD

    @property
    def has_backward(self):
        return self is not Direction.FORWARD


def phi(x, w_p, valid=None):
    """Soft-pool ``x`` ([..., N, d]) into ``w_p.shape[1]`` latent rows.

    Each latent row is a softmax-weighted average of the valid token rows,
    with weights from the column scores ``x @ w_p``.
    """
    n = x.shape[-2]
    if n < 1:
        raise EmptySequenceError("dynamic projection of an empty sequence")
    if valid is None:
        valid = np.ones(x.shape[:-1], dtype=np.bool_)
    valid = np.asarray(valid, dtype=np.bool_)
    if not valid.any(axis=-1).all():
        raise EmptySequenceError("dynamic projection needs at least one valid token")
    scores = T.transpose(T.matmul(x, w_p))
    weights = T.softmax_rows(scores, valid[..., None, :])
    return T.matmul(weights, x)


def _proj_name(cfg, direction):
    """Parameter name of the projection basis a direction uses, or None."""
    variant = cfg.init_for(direction)
    if variant is None or not variant.uses_projection:
        return None
    both = cfg.fwd_init is not None and cfg.fwd_init.uses_projection \
        and cfg.bwd_init is not None and cfg.bwd_init.uses_projection
    if both and cfg.sharing is ProjectionSharing.SEPARATE:
        return f"latent.phi_{'f' if direction is Direction.FORWARD else 'b'}"
    return "latent.phi"


def latent_param_shapes(cfg):
    """Name -> shape of the latent-init parameters, in declaration order."""
    shapes = {}
    for direction in (Direction.FORWARD, Direction.BACKWARD):
        variant = cfg.init_for(direction)
        if variant is None:
            continue
        if variant is InitVariant.POS_EMB_1D:
            shapes[f"latent.pos_{'f' if direction is Direction.FORWARD else 'b'}"] = (cfg.l, cfg.d)
        else:
            shapes[_proj_name(cfg, direction)] = (cfg.d, cfg.l)
    return shapes


def init_latent_params(cfg, rng):
    out = {}
    for name, shape in latent_param_shapes(cfg).items():
        if "pos" in name:
            out[name] = T.Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)
        else:
            out[name] = T.Tensor(xavier_uniform(rng, shape[0], shape[1]), requires_grad=True)
    return out


def make_l_init(x, valid, variant, direction, params, cfg):
    """Initial latent block for one pass.

    ``x`` is the embedded sequence ([..., N, d]) and ``valid`` its token mask.
    A learned table is input independent and is broadcast over any batch axis.
    """
    if cfg.init_for(direction) is None:
        raise ConfigError(f"{direction.value} pass is disabled for direction={cfg.direction.value}")
    if variant is InitVariant.POS_EMB_1D:
        table = params[f"latent.pos_{'f' if direction is Direction.FORWARD else 'b'}"]
        return T.expand_batch(table, x.shape[0]) if x.ndim == 3 else table
    return phi(x, params[_proj_name(cfg, direction)], valid)
