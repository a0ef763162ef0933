import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfss.cbbi import (
    CandidateMaps, InferenceConfig, cbbi_decide, classwise_cosine_scores, foreground_mask, infer,
    infer_rows, top2,
)
from gfss.errors import ConfigError
from gfss.registry import SessionRegistry, extend_session
from gfss.synthgen import sample_eval_set, sample_supports

import oracles


def test_cosine_scores_match_loops(rng):
    k = rng.normal(size=(4, 3))
    k[2] = 0
    f = rng.normal(size=(2, 3, 2, 3))
    f[0, :, 0, 0] = 0
    np.testing.assert_allclose(classwise_cosine_scores(k, f), oracles.cosine_scores(k, f), atol=1e-12)


def test_top2_ties_go_to_lower_index():
    s = np.zeros((1, 3, 1, 1))
    c = top2(s)
    assert (c.top1_class.item(), c.top2_class.item()) == (0, 1)
    with pytest.raises(ConfigError):
        top2(np.zeros((1, 1, 1, 1)))


def _cands(v1, v2, c1=0, c2=1):
    arr = lambda v: np.array([[[v]]])  # noqa: E731
    return CandidateMaps(arr(v1), arr(v2), arr(c1), arr(c2))


@pytest.mark.parametrize("fg,v1,v2,b,expect", [
    (1, 0.9, 0.5, 0.5, 1),   # 1.0 > 0.9 flips
    (1, 0.9, 0.3, 0.5, 0),   # 0.8 < 0.9 keeps
    (1, 0.9, 0.4, 0.5, 0),   # equality keeps top1
    (0, 0.9, 0.8, 0.5, 0),   # outside foreground never flips
])
def test_bias_rule(fg, v1, v2, b, expect):
    cfg = InferenceConfig(bias_b=b)
    out = cbbi_decide(_cands(np.float64(v1), np.float64(v2)), np.array([[[fg]]]), cfg)
    assert out.item() == expect


def test_novel_only_bias_gates_on_second_class():
    cfg = InferenceConfig(novel_only_bias=True)
    fg = np.array([[[1]]])
    assert cbbi_decide(_cands(0.9, 0.8, 0, 1), fg, cfg, base_count=2).item() == 0
    assert cbbi_decide(_cands(0.9, 0.8, 0, 2), fg, cfg, base_count=2).item() == 2


def test_registered_model_inference_shapes(small_model, small_world):
    reg = extend_session(SessionRegistry.from_model(small_model), small_model,
                         [sample_supports(small_world, c) for c in small_world.novel_ids])
    feats, _ = sample_eval_set(small_world, 3)
    pred = infer(small_model, reg, feats)
    assert pred.shape == (3, 12, 12)
    assert set(np.unique(pred)) <= set(reg.class_ids)
    fg = foreground_mask(small_model, feats, InferenceConfig())
    assert set(np.unique(fg)) <= {0, 1}


def test_inference_leaves_registry_untouched(small_model, small_world):
    reg = SessionRegistry.from_model(small_model)
    before = reg.bank.kernels.tobytes()
    infer(small_model, reg, sample_eval_set(small_world, 2)[0])
    assert reg.bank.kernels.tobytes() == before


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zero_bias_is_plain_argmax(small_model, small_world, seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(1, 8, 4, 4)).astype(np.float32)
    reg = SessionRegistry.from_model(small_model)
    cfg = InferenceConfig(bias_b=0.0, use_pkl_update=False)
    plain = classwise_cosine_scores(reg.bank, feats).argmax(axis=1)
    np.testing.assert_array_equal(infer_rows(small_model, reg, feats, cfg), plain)
