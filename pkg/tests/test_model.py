from hypothesis import given, strategies as st
import numpy as np
import pytest

from blrp.errors import ConfigError, SequencingError, VocabularyError
from blrp.latent import Direction, InitVariant, ProjectionSharing
from blrp import tensor as T
from blrp.model import (BLRPModel, ModelConfig, backward_pass, classify, forward_pass,
                        param_count, preset)

import instances
import oracles

VARIANTS = instances.VARIANTS
flow_configs = instances.flow_configs
toy_model = instances.toy_model
assert_trace_matches = instances.assert_trace_matches
mutated_logits = instances.mutated_logits
closed_form = instances.closed_form
random_config = instances.random_config


def _id(cfg):
    return "-".join(str(v) for v in cfg.values())


@pytest.mark.parametrize("n_tokens", [3, 11])  # T = 1 and T = 3 at t = 4
@pytest.mark.parametrize("kw", list(flow_configs()), ids=_id)
def test_recurrence_matches_hand_stepped_reference(kw, n_tokens):
    model = toy_model(**kw)
    tokens = np.random.default_rng(n_tokens).integers(1, 17, size=n_tokens).tolist()
    assert_trace_matches(model, tokens)


def test_forward_pass_direct_call_matches_trace():
    model = toy_model()
    seq = model.segment(list(range(1, 12)))
    tr = model.trace(seq)
    x_f, l_f, sizes = forward_pass(seq, tr.l_init_f, model.blocks, InitVariant.DYN_PROJ_RESIDUAL)
    for a, b in zip(l_f, tr.l_fwd):
        np.testing.assert_array_equal(a.data, b.data)
    assert sizes == tr.key_sizes_f


def test_bidirectional_backward_requires_forward_trace():
    model = toy_model()
    seq = model.segment(list(range(1, 12)))
    tr = model.trace(seq)
    with pytest.raises(SequencingError):
        backward_pass(seq, tr.l_init_b, model.blocks, InitVariant.DYN_PROJ_RESIDUAL)
    with pytest.raises(SequencingError):
        backward_pass(seq, tr.l_init_b, model.blocks, InitVariant.DYN_PROJ_RESIDUAL,
                      l_fwd=tr.l_fwd[:2], x_fwd=tr.x_fwd[:2])


@pytest.mark.parametrize("fwd,bwd,expect_f,expect_b", [
    ("dynproj", "dynproj", [4, 8, 8], [8, 12, 12]),
    ("dynproj_init", "dynproj_init", [4, 4, 4], [8, 8, 8]),
    ("1DPosEmb", "dynproj", [4, 4, 4], [8, 12, 12]),
])
def test_key_union_sizes(fwd, bwd, expect_f, expect_b):
    model = BLRPModel(preset("toy", fwd_init=fwd, bwd_init=bwd))
    tr = model.trace(model.segment(list(range(1, 12))))
    assert tr.key_sizes_f == expect_f
    assert tr.key_sizes_b == expect_b


def test_backward_only_key_sizes():
    model = BLRPModel(preset("toy", direction="backward"))
    tr = model.trace(model.segment(list(range(1, 12))))
    assert tr.key_sizes_f == [] and tr.key_sizes_b == [4, 8, 8]
    assert tr.l_final is tr.l_bwd[0]


def test_forward_only_final_state():
    model = BLRPModel(preset("toy", direction="forward"))
    tr = model.trace(model.segment(list(range(1, 12))))
    assert tr.l_final is tr.l_fwd[-1] and tr.l_bwd == []


def test_shared_sharing_reuses_initial_block():
    model = BLRPModel(preset("toy", sharing="shared"))
    tr = model.trace(model.segment(list(range(1, 9))))
    assert tr.l_init_b is tr.l_init_f
    siamese = BLRPModel(preset("toy", sharing="siamese"))
    tr2 = siamese.trace(siamese.segment(list(range(1, 9))))
    assert tr2.l_init_b is not tr2.l_init_f
    np.testing.assert_array_equal(tr2.l_init_b.data, tr2.l_init_f.data)


# -- pad invariance ----------------------------------------------------------

@pytest.mark.parametrize("kw", list(flow_configs()), ids=_id)
def test_pad_invariance_all_variants(kw, rng):
    model = BLRPModel(preset("toy", **kw))
    t = model.cfg.t
    for n in (1, t - 1, t + 1, 3 * t - 5):
        tokens = rng.integers(1, 17, size=n).tolist()
        clean = model.logits(tokens)
        for _ in range(3):
            np.testing.assert_allclose(mutated_logits(model, tokens, rng), clean, rtol=0, atol=1e-9)


@given(st.integers(1, 40), st.integers(0, 2**31))
def test_batch_padding_does_not_change_logits(n, seed):
    model = _shared_model()
    rng = np.random.default_rng(seed)
    t = model.cfg.t
    short = rng.integers(1, 17, size=n).tolist()
    seg = -(-n // t)
    long = rng.integers(1, 17, size=seg * t).tolist()
    alone = model.logits(short)
    batched = model.batch_logits([long, short]).data[1, 0]
    np.testing.assert_allclose(batched, alone, rtol=0, atol=1e-10)


_CACHE = {}


def _shared_model():
    if "m" not in _CACHE:
        _CACHE["m"] = BLRPModel(preset("toy"))
    return _CACHE["m"]


# -- determinism, errors, config --------------------------------------------

def test_same_seed_same_weights_and_logits():
    a, b = BLRPModel(preset("toy", seed=3)), BLRPModel(preset("toy", seed=3))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    np.testing.assert_array_equal(a.logits([1, 2, 3, 4, 5]), b.logits([1, 2, 3, 4, 5]))
    c = BLRPModel(preset("toy", seed=4))
    assert not np.array_equal(a.params["embed.tokens"].data, c.params["embed.tokens"].data)


def test_vocabulary_and_batch_errors():
    model = _shared_model()
    with pytest.raises(VocabularyError):
        model.logits([1, 17])
    with pytest.raises(VocabularyError):
        model.logits([])
    with pytest.raises(ConfigError):
        model.batch_logits([[1] * 3, [1] * 9])


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(t=0)
    with pytest.raises(ConfigError):
        preset("nope")
    with pytest.raises(ValueError):
        ModelConfig(fwd_init="bogus")
    cfg = ModelConfig(direction="forward")
    assert cfg.bwd_init is None
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_load_arrays_shape_check():
    model = _shared_model()
    arrays = dict(model.state_arrays())
    arrays["head.b2"] = np.zeros(3)
    with pytest.raises(ConfigError):
        BLRPModel(preset("toy")).load_arrays(arrays)


# -- parameter accounting ------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_param_count_closed_form_random(seed):
    cfg = random_config(np.random.default_rng(seed))
    assert param_count(cfg) == closed_form(cfg) == BLRPModel(cfg).num_params()


def test_param_count_structural_deltas():
    base = preset("toy")
    d, l = base.d, base.l
    fwd = base.replace(direction=Direction.FORWARD)
    assert param_count(base) - param_count(fwd) == d * l       # backward projection basis
    assert not any("phi_b" in k or "pos_b" in k for k in BLRPModel(fwd).params)
    shared = base.replace(sharing=ProjectionSharing.SHARED_SINGLE)
    assert param_count(base) - param_count(shared) == d * l
    pos = base.replace(fwd_init=InitVariant.POS_EMB_1D, bwd_init=InitVariant.POS_EMB_1D)
    assert param_count(pos) == param_count(base)                # l*d either way


def test_presets_construct():
    for name in ("toy", "listops-desk", "listops"):
        cfg = preset(name)
        assert param_count(cfg) == BLRPModel(cfg).num_params()


def test_toy_count_by_hand():
    # d=8, h_ff=16, t=l=4, vocab 17, 2 self layers, 10 classes, two projection bases
    embed = 17 * 8 + 4 * 8
    self_block = 4 * 64 + 2 * 8 * 16 + 16 + 8 + 4 * 8
    cross_block = self_block + 2 * 8
    head = 8 * 16 + 16 + 16 * 10 + 10
    assert param_count(preset("toy")) == embed + 2 * self_block + 2 * cross_block + 2 * 4 * 8 + head == 2850


def test_doubling_hidden_size_delta():
    a = preset("toy")
    b = a.replace(h_ff=2 * a.h_ff)
    h, d = a.h_ff, a.d
    # every block's FFN gains 2*d*h + h; the head gains d*h + h + h*classes
    per_block = 2 * d * h + h
    assert param_count(b) - param_count(a) == 4 * per_block + d * h + h + h * a.classes


# -- classifier head -------------------------------------------------------------

def test_zero_head_gives_zero_logits():
    head = {k: T.Tensor(np.zeros(s)) for k, s in
            (("head.w1", (4, 3)), ("head.b1", (3,)), ("head.w2", (3, 2)), ("head.b2", (2,)))}
    out = classify(T.Tensor(np.zeros((5, 4))), head).data
    np.testing.assert_array_equal(out, np.zeros((1, 2)))


def test_two_class_head_by_hand():
    l_final = np.array([[1.0, -1.0], [3.0, 1.0]])         # pooled row: [2, 0]
    w1, b1 = np.array([[0.5, -1.0], [2.0, 0.0]]), np.array([0.0, 1.0])
    w2, b2 = np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.1, -0.1])
    head = {"head.w1": T.Tensor(w1), "head.b1": T.Tensor(b1), "head.w2": T.Tensor(w2),
            "head.b2": T.Tensor(b2)}
    out = classify(T.Tensor(l_final), head).data[0]
    h = [oracles.gelu(2 * 0.5 + 0.0), oracles.gelu(2 * -1.0 + 1.0)]
    np.testing.assert_allclose(out, [h[0] + 0.1, 2 * h[1] - 0.1], atol=1e-15)


def test_argmax_invariant_to_logit_shift():
    model = BLRPModel(preset("toy"))
    tokens = list(range(1, 10))
    before = model.logits(tokens)
    model.params["head.b2"].data[...] += 7.5
    after = model.logits(tokens)
    assert before.argmax() == after.argmax()
    np.testing.assert_allclose(after - before, 7.5, atol=1e-12)
