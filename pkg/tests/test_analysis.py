import numpy as np
import pytest

from effvit.analysis import (
    TOY_CASES,
    SimilarityReport,
    channel_scores,
    check_case,
    compare_attention_variants,
    cosine,
    gradcheck,
    head_similarity,
    taylor_importance,
    toy_case,
)
from effvit.analysis.importance import classify
from effvit.core import tensor as T
from effvit.core.rng import Rng
from effvit.errors import ContractError, InputError, ParameterError, StateError
from effvit.model import AttentionTrace, Ctx, GroupAttention, ModelSpec, build_model
from effvit.model import nn

import oracles


def trace_of(*blocks):
    tr = AttentionTrace()
    for i, maps in enumerate(blocks):
        tr.begin_block(f"b{i}")
        for m in maps:
            tr.add_map(np.asarray(m, dtype=np.float64))
    return tr


# --------------------------------------------------------------- similarity


def test_identical_maps_give_one():
    m = np.random.default_rng(0).random((2, 4, 4))
    rep = head_similarity(trace_of([m, m.copy()]))
    assert rep.blocks[0]["heads"] == [1.0, 1.0]


def test_orthogonal_maps_give_zero():
    rep = head_similarity(trace_of([[[[1.0, 0.0]]], [[[0.0, 1.0]]]]))
    assert rep.blocks[0]["heads"] == [0.0, 0.0]


def test_random_trace_vs_hand_oracle():
    rng = np.random.default_rng(1)
    blocks = [[rng.random((3, 5, 5)) for _ in range(3)] for _ in range(2)]
    rep = head_similarity(trace_of(*blocks))
    for b, maps in zip(rep.blocks, blocks):
        np.testing.assert_allclose(b["heads"], oracles.max_cosine(maps), atol=1e-6, rtol=0)
        assert abs(b["mean"] - np.mean(oracles.max_cosine(maps))) < 1e-6
    assert abs(rep.overall_mean - np.mean([b["mean"] for b in rep.blocks])) < 1e-12


def test_cosine_symmetric_to_the_bit():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.standard_normal(17), rng.standard_normal(17)
        assert cosine(a, b) == cosine(b, a)
        assert -1.0 <= cosine(a, b) <= 1.0


def test_similarity_scale_invariant():
    rng = np.random.default_rng(3)
    maps = [rng.random((2, 4, 4)) for _ in range(3)]
    base = head_similarity(trace_of(maps)).blocks[0]["heads"]
    scaled = head_similarity(trace_of([maps[0] * 7.5, maps[1], maps[2] * 0.01])).blocks[0]["heads"]
    np.testing.assert_allclose(scaled, base, atol=1e-6, rtol=0)


def test_similarity_errors_and_single_head_blocks():
    with pytest.raises(InputError):
        head_similarity(AttentionTrace())
    m = np.ones((1, 2, 2)) / 2
    rep = head_similarity(trace_of([m], [m, m]))
    assert rep.blocks[0]["heads"] == [] and rep.blocks[0]["mean"] is None
    assert rep.coverage == 0.5 and rep.overall_mean == 1.0


def test_similarity_report_formats():
    m = np.random.default_rng(4).random((1, 3, 3))
    rep = head_similarity(trace_of([m, m + 0.5]))
    csv = rep.to_csv().splitlines()
    assert csv[0] == "block,head,max_cos" and len(csv) == 3
    assert '"overall_mean"' in rep.to_json()
    assert "overall mean" in rep.to_text()


def test_shared_weight_mhsa_control_is_exactly_one():
    pair = compare_attention_variants("M0", seed=3, batch=1, shared_mhsa=True)
    for b in pair.mhsa.blocks:
        assert all(abs(v - 1.0) <= 1e-6 for v in b["heads"])


def _orthogonal_cga():
    attn = GroupAttention(8, 2, qk_dim=4, kind="cga", cascade=True, rng=Rng(0), dtype="f64")
    rng = np.random.default_rng(0)
    for head in attn.heads:
        w = head.qkv.conv.weight
        q, _ = np.linalg.qr(rng.standard_normal((w.shape[0], w.shape[0])))
        w.data[...] = q[:, : w.shape[1]].reshape(w.shape) * 3.0
    return attn


def test_cga_orthogonal_heads_below_one():
    attn = _orthogonal_cga()
    tr = AttentionTrace()
    attn(T.uniform((2, 8, 4, 4), Rng(1), -1, 1, dtype="f64"), Ctx(trace=tr))
    vals = head_similarity(tr).blocks[0]["heads"]
    assert all(v < 1.0 for v in vals)


def test_paired_report_is_deterministic():
    spec = ModelSpec(widths=(16, 24, 32), depths=(1, 1, 1), heads=(2, 2, 1), input_resolution=32, num_classes=5)
    a = compare_attention_variants(spec, seed=5, batch=2)
    b = compare_attention_variants(spec, seed=5, batch=2)
    assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
    assert a.partial
    assert a.cga.blocks[-1]["mean"] is None


# --------------------------------------------------------------- importance


def _tiny_regression():
    lin = nn.Linear(3, 2, rng=Rng(0), dtype="f64")
    rng = np.random.default_rng(5)
    lin.weight.data[...] = rng.standard_normal((2, 3))
    lin.bias.data[...] = rng.standard_normal(2)
    x = rng.standard_normal((4, 3))
    labels = np.array([0, 1, 1, 0])
    return lin, x, labels


def test_taylor_tiny_regression_vs_analytic():
    lin, x, labels = _tiny_regression()
    z = x @ lin.weight.data.T + lin.bias.data
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    dw = (p - np.eye(2)[labels]).T @ x / len(x)
    expected = np.abs((lin.weight.data * dw).sum(axis=1))
    rep = taylor_importance(lin, T.Tensor(x), labels)
    np.testing.assert_allclose(rep.scores["weight"], expected, atol=1e-6, rtol=0)
    assert lin.weight.grad is None  # caller's module untouched


def test_taylor_zero_gradient_scores_zero():
    lin, x, labels = _tiny_regression()
    rep = taylor_importance(lin, T.Tensor(np.zeros_like(x)), labels)
    assert (rep.scores["weight"] == 0).all()
    lin.weight.data[1] = 0
    rep = taylor_importance(lin, T.Tensor(x), labels)
    assert rep.scores["weight"][1] == 0.0 and rep.scores["weight"][0] > 0


@pytest.mark.parametrize("k", [3.0, -2.0, 0.25])
def test_taylor_loss_scaling(k):
    m = build_model(ModelSpec(widths=(16, 24, 32), depths=(1, 1, 1), heads=(2, 2, 2),
                              input_resolution=32, num_classes=5), 1, dtype="f64")
    x = T.uniform((3, 3, 32, 32), Rng(2), -1, 1, dtype="f64")
    labels = [0, 3, 4]
    base = taylor_importance(m, x, labels)
    scaled = taylor_importance(m, x, labels, loss_scale=k)
    for name, s in base.scores.items():
        # near-zero channels carry f64 cancellation noise relative to the largest score
        np.testing.assert_allclose(scaled.scores[name], abs(k) * s, rtol=1e-7, atol=1e-9 * abs(k) * s.max())
        assert scaled.ranking(name) == base.ranking(name)


def test_taylor_errors():
    lin, x, labels = _tiny_regression()
    for _, t in lin.named_params():
        t.requires_grad = False
    with pytest.raises(StateError):
        taylor_importance(lin, T.Tensor(x), labels)
    m = build_model(ModelSpec(widths=(16, 24, 32), depths=(1, 1, 1), heads=(2, 2, 2),
                              input_resolution=32, num_classes=5), 0)
    with pytest.raises(ParameterError):
        taylor_importance(m, T.uniform((1, 3, 32, 32), Rng(0)), [1])


def test_channel_scores_nonnegative_and_shape():
    rng = np.random.default_rng(0)
    s = channel_scores(rng.standard_normal((6, 3, 3, 3)), rng.standard_normal((6, 3, 3, 3)))
    assert s.shape == (6,) and (s >= 0).all()


def test_importance_groups_and_retention():
    m = build_model("M0", 0)
    rep = taylor_importance(m, T.uniform((2, 3, 224, 224), Rng(1), -1, 1), [1, 7])
    assert rep.groups["stages.0.0.attn.heads.0.qkv.conv.weight"] == "qkv"
    assert rep.groups["stages.1.0.pre_ffn0.pw1.conv.weight"] == "ffn"
    groups = {g for _, g, _, _ in rep.channel_groups()}
    assert {"q", "k", "v", "pre_ffn0", "post_ffn0"} <= groups
    ret = rep.retention(0.5)
    blk = ret["stages.0.0"]
    # Q/K are qk_dim per head, V is C/h per head, all normalized by C
    assert blk["q"]["before"] == pytest.approx(4 * 16 / 64)
    assert blk["v"]["before"] == pytest.approx(1.0)
    assert blk["pre_ffn0"]["before"] == pytest.approx(2.0)
    kept = sum(v["after"] for b in ret.values() for v in b.values())
    assert kept > 0
    assert classify("patch_embed.0.conv.weight") == "embed"
    assert classify("head.fc.weight") == "classifier"


# --------------------------------------------------------------- gradcheck


def test_gradcheck_linear_tight():
    assert check_case("linear", 1e-6).passed


def test_gradcheck_cga():
    rep = check_case("cga", 1e-4)
    assert rep.passed and rep.max_rel < 1e-4
    assert {e["name"] for e in rep.entries} >= {"input", "proj.conv.weight"}


@pytest.mark.parametrize("name", [c for c in TOY_CASES if c not in ("linear", "cga")])
def test_gradcheck_all_layer_types(name):
    assert check_case(name, 1e-4).passed


class _DoubledGrad(nn.Module):
    """tanh with a backward that is deliberately twice the true derivative."""

    def forward(self, x, ctx):
        return T.custom_op("bad_tanh", "elementwise", np.tanh,
                           lambda g, a: (2 * g * (1 - np.tanh(a) ** 2),), x)


def test_gradcheck_negative_control():
    x = T.uniform((3, 4), Rng(0), -1, 1, dtype="f64")
    rep = gradcheck(_DoubledGrad(), x, 1e-4)
    assert not rep.passed and rep.max_rel > 0.1


def test_gradcheck_contracts():
    with pytest.raises(ContractError):
        gradcheck(nn.Linear(3, 2, rng=Rng(0)), T.uniform((2, 3), Rng(0)), 1e-4)
    lin = nn.Linear(3, 2, rng=Rng(0), dtype="f64")
    with pytest.raises(ContractError):
        gradcheck(lin, T.uniform((2, 3), Rng(0), dtype="f64"), 1e-4, loss_fn=lambda out: out)


def test_gradcheck_restores_buffers():
    mod, x, mode = toy_case("batchnorm_train")
    before = mod.running_mean.data.copy()
    gradcheck(mod, x, 1e-4, mode=mode)
    assert mod.running_mean.data.tobytes() == before.tobytes()


def test_gradcheck_report_formats():
    rep = check_case("linear")
    assert rep.to_dict()["passed"] and "PASS" in rep.to_text()
    assert isinstance(SimilarityReport().to_dict(), dict)
