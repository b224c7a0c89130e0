from hypothesis import given, strategies as st
import numpy as np
import pytest

from blrp import tensor as T
from blrp.errors import ConfigError, EmptySequenceError
from blrp.latent import (Direction, InitVariant, ProjectionSharing, latent_param_shapes,
                         make_l_init, phi)
from blrp.model import preset

import instances
import oracles


@pytest.mark.parametrize("seed", range(20))
def test_phi_matches_oracle(seed):
    x, w, valid = instances.phi_case(seed)
    got = phi(instances.tensor(x), instances.tensor(w), valid).data
    np.testing.assert_allclose(got, oracles.phi(x, w, valid), rtol=0, atol=1e-9)


@given(st.integers(0, 10_000))
def test_phi_rows_are_convex_combinations(seed):
    x, w, valid = instances.phi_case(seed)
    out = phi(instances.tensor(x), instances.tensor(w), valid).data
    lo, hi = x[valid].min(axis=0), x[valid].max(axis=0)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_phi_zero_weights_give_mean_of_valid_rows(rng):
    x = rng.normal(size=(6, 3))
    valid = np.array([True, True, False, True, False, True])
    out = phi(T.Tensor(x), T.Tensor(np.zeros((3, 4))), valid).data
    np.testing.assert_allclose(out, np.tile(x[valid].mean(axis=0), (4, 1)), atol=1e-12)


def test_phi_single_token(rng):
    x = rng.normal(size=(1, 3))
    out = phi(T.Tensor(x), T.Tensor(rng.normal(size=(3, 5)))).data
    np.testing.assert_allclose(out, np.tile(x, (5, 1)), atol=1e-15)


def test_phi_errors():
    with pytest.raises(EmptySequenceError):
        phi(T.Tensor(np.zeros((0, 3))), T.Tensor(np.zeros((3, 2))))
    with pytest.raises(EmptySequenceError):
        phi(T.Tensor(np.ones((2, 3))), T.Tensor(np.zeros((3, 2))), np.array([False, False]))


def test_param_shapes_per_sharing():
    base = preset("toy")
    assert latent_param_shapes(base) == {"latent.phi_f": (8, 4), "latent.phi_b": (8, 4)}
    for mode in (ProjectionSharing.SHARED_SINGLE, ProjectionSharing.SIAMESE):
        assert latent_param_shapes(base.replace(sharing=mode)) == {"latent.phi": (8, 4)}
    mixed = base.replace(fwd_init=InitVariant.POS_EMB_1D)
    assert latent_param_shapes(mixed) == {"latent.pos_f": (4, 8), "latent.phi": (8, 4)}
    fwd_only = base.replace(direction=Direction.FORWARD)
    assert latent_param_shapes(fwd_only) == {"latent.phi": (8, 4)}


def test_make_l_init_table_is_input_independent(rng):
    cfg = preset("toy", fwd_init="1DPosEmb")
    table = T.Tensor(rng.normal(size=(4, 8)))
    params = {"latent.pos_f": table}
    a = make_l_init(T.Tensor(rng.normal(size=(5, 8))), None, cfg.fwd_init, Direction.FORWARD, params, cfg)
    assert a is table
    b = make_l_init(T.Tensor(rng.normal(size=(3, 5, 8))), None, cfg.fwd_init, Direction.FORWARD,
                    params, cfg)
    assert b.shape == (3, 4, 8)
    np.testing.assert_array_equal(b.data[2], table.data)


def test_make_l_init_disabled_direction():
    cfg = preset("toy", direction="forward")
    with pytest.raises(ConfigError):
        make_l_init(T.Tensor(np.ones((2, 8))), None, InitVariant.DYN_PROJ_RESIDUAL,
                    Direction.BACKWARD, {}, cfg)


def test_variant_flags():
    assert not InitVariant.POS_EMB_1D.uses_projection
    assert InitVariant.DYN_PROJ_INIT_ONLY.uses_projection and not InitVariant.DYN_PROJ_INIT_ONLY.residual
    assert InitVariant.DYN_PROJ_RESIDUAL.residual
    assert Direction.BIDIRECTIONAL.has_forward and Direction.BIDIRECTIONAL.has_backward
    assert not Direction.FORWARD.has_backward and not Direction.BACKWARD.has_forward
