import numpy as np
import pytest

from janus import numerics as nx
from janus.encoder import ModelConfig
from janus.fusion import build_mask, target_map
from janus.model import JanusModel, audit_params, init_params, leakage_check

SMALL = ModelConfig(d_model=16, n_layers=2, n_experts=4, n_heads=2, mid_attention=0)


class TestForward:
    def test_shapes(self):
        m = JanusModel(SMALL)
        out = m(np.zeros((3, 5), dtype=int))
        assert out.fused.shape == (3, 10, 16)
        assert out.logits.shape == (3, 10, 7)
        assert len(out.stats) == 2  # one MoE layer per direction

    def test_unbatched_input(self):
        m = JanusModel(SMALL)
        a = m(np.array([0, 1, 2, 3])).logits.data
        b = m(np.array([[0, 1, 2, 3]])).logits.data
        np.testing.assert_array_equal(a, b)

    def test_rows_subset(self):
        m = JanusModel(SMALL, dtype=np.float64)
        ids = np.random.default_rng(0).integers(0, 4, size=(2, 6))
        full = m(ids).logits.data
        rows = target_map(6).rows
        np.testing.assert_allclose(m(ids, rows=rows).logits.data, full[:, rows], atol=1e-12)

    def test_unknown_mask_kind(self):
        with pytest.raises(ValueError, match="unknown mask"):
            JanusModel(SMALL)(np.zeros((1, 4), dtype=int), mask="diagonal")

    def test_zero_backward_removes_right_context(self):
        m = JanusModel(SMALL, dtype=np.float64)
        ids = np.random.default_rng(1).integers(0, 4, size=8)
        base = m(ids, zero_backward=True).logits.data
        alt = ids.copy()
        alt[7] = (alt[7] + 1) % 4
        moved = m(alt, zero_backward=True).logits.data
        # forward rows 0..6 see only positions <= 6 once the backward half is silenced
        np.testing.assert_array_equal(moved[0, :7], base[0, :7])

    def test_init_is_seeded(self):
        a = init_params(SMALL)
        b = init_params(SMALL)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        c = init_params(ModelConfig(**{**SMALL.to_dict(), "seed": 1}))
        assert not np.array_equal(a["fwd.embed"].data, c["fwd.embed"].data)

    def test_stacks_are_independent(self):
        p = init_params(SMALL)
        assert not np.array_equal(p["fwd.embed"].data, p["bwd.embed"].data)

    def test_fusion_ffn_params(self):
        p = init_params(ModelConfig(**{**SMALL.to_dict(), "fusion_ffn": True}))
        assert {"fusion_ffn.w1", "fusion_ffn.norm"} <= set(p)
        assert "fusion_ffn.w1" not in init_params(SMALL)


class TestLeakage:
    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
    def test_passes(self, dtype, tol):
        rep = leakage_check(SMALL, 0, 9, dtype=dtype)
        assert rep.passed(tol), rep.failure(tol)
        assert rep.n_checks == sum(2 for _ in range(1, 8)) * 6 + 2 * 6

    def test_every_substitute_is_checked(self):
        rep = leakage_check(SMALL, 1, 4)
        # 4 positions x 6 substitutes; the two end positions have one row each, the middle two have two
        assert rep.n_checks == 6 * (1 + 2 + 2 + 1)

    def test_mutated_mask_fails(self):
        rep = leakage_check(SMALL, 0, 8, mask=build_mask(8, offset=1))
        assert not rep.passed(1e-5)
        assert "leak at target position" in rep.failure(1e-5)

    def test_non_degenerate(self):
        # rows that do not predict the substituted token must react to it
        rep = leakage_check(SMALL, 2, 8)
        assert rep.min_nontarget_diff > 1e-3

    def test_fusion_ffn_keeps_guarantee(self):
        cfg = ModelConfig(**{**SMALL.to_dict(), "fusion_ffn": True})
        assert leakage_check(cfg, 0, 8, dtype=np.float64).passed(1e-10)


class TestAudit:
    def test_moe_has_idle_parameters(self):
        a = audit_params(ModelConfig(n_layers=8, moe_ratio=0.5, n_experts=16))
        assert a.total > a.activated

    def test_dense_is_fully_active(self):
        a = audit_params(ModelConfig(n_layers=8, moe_ratio=0.0, n_experts=16))
        assert a.total == a.activated

    def test_hand_count(self):
        cfg = ModelConfig(d_model=4, n_layers=2, n_experts=3, n_heads=1, moe_ratio=0.5, fusion_rel_window=0)
        d, e, h, v = 4, 8, 16, 7
        mix = d + 3 * d * e + e + e * d
        ffn = d * h + h + h * d + d
        dense_ff = d + ffn
        moe_ff = d + d * 3 + 3 * ffn
        stack = v * d + 2 * mix + dense_ff + moe_ff + d
        fusion = 4 * d * d + d
        head = d * v + v
        a = audit_params(cfg)
        assert a.total == 2 * stack + fusion + head
        assert a.total - a.activated == 2 * 2 * ffn
        assert "total parameters" in a.report()

    def test_counts_follow_given_params(self):
        p = init_params(SMALL)
        assert audit_params(SMALL, p).total == sum(x.size for x in p.values())


def test_float32_and_float64_agree():
    m32 = JanusModel(SMALL, dtype=np.float32)
    m64 = m32.astype(np.float64)
    ids = np.random.default_rng(3).integers(0, 4, size=(2, 10))
    with nx.no_grad():
        a = m32(ids).logits.data
        b = m64(ids).logits.data
    np.testing.assert_allclose(a, b, atol=1e-4)
