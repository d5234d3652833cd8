import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptrag import autodiff as ad
from ptrag.autodiff import ShapeError, Tensor
from ptrag.model import (Batch, ModelConfig, PTRAG, VanillaRAG, build_model, forward_pt_rag,
                         forward_state, forward_vanilla_rag, loss)
from ptrag.nn import Linear
from ptrag.retrieval import build_db, top_k
from ptrag.selector import SelectionMask

CFG = ModelConfig(d=8, G=6, E=5, K=3, depth=1, heads=2, score_hidden=7, proj_hidden=7, seed=4)


@pytest.fixture
def db():
    rng = np.random.default_rng(11)
    return build_db([f"P{i}" for i in range(9)], rng.normal(size=(9, CFG.E)))


@pytest.fixture
def x_ctrl():
    return np.random.default_rng(12).normal(size=(4, CFG.G))


class _Recorder:
    """Stands in for the generator and keeps its input."""

    def __call__(self, z):
        self.z = ad.as_tensor(z)
        return self.z


def _mask(values):
    values = np.asarray(values, dtype=np.float64)
    return SelectionMask(values, values, 0.5, Tensor(values), np.zeros(values.shape + (2,)))


class TestBuild:
    @pytest.mark.parametrize("kind", ["state_genept", "vanilla_rag", "pt_rag"])
    def test_kinds(self, kind):
        assert build_model(kind, CFG).kind == kind

    def test_identity_baseline_needs_width(self):
        with pytest.raises(ValueError):
            build_model("state", CFG)
        assert build_model("state", ModelConfig(**{**CFG.to_dict(), "n_perts": 9})).kind == "state"

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown"):
            build_model("graph_rag", CFG)

    def test_head_dimensions(self):
        m = PTRAG(CFG)
        assert m.score_mlp.layers[0].weight.shape == (3 * CFG.d, CFG.score_hidden)
        assert m.score_mlp.layers[-1].weight.shape[1] == 2
        assert m.proj.layers[0].weight.shape[0] == 3 * CFG.d
        assert m.proj.layers[-1].weight.shape[1] == CFG.d

    def test_cell_encoder_frozen_and_seeded(self):
        a, b = PTRAG(CFG), PTRAG(CFG)
        assert a.cell_encoder.projection.tobytes() == b.cell_encoder.projection.tobytes()
        assert not any("cell_encoder" in name for name, _ in a.named_parameters())
        assert not a.cell_encoder.projection.flags.writeable
        c = PTRAG(ModelConfig(**{**CFG.to_dict(), "seed": 5}))
        assert not np.array_equal(a.cell_encoder.projection, c.cell_encoder.projection)


class TestState:
    def test_zero_readout(self, x_ctrl):
        m = build_model("state_genept", CFG)
        m.generator.readout = Linear(CFG.d, CFG.G, np.random.default_rng(0), zero=True)
        out = forward_state(m, x_ctrl, np.ones(CFG.E))
        assert out.shape == (4, CFG.G) and np.all(out.data == 0.0)

    def test_generator_sees_sum(self, x_ctrl):
        m = build_model("state_genept", CFG)
        m.generator = _Recorder()
        e = np.arange(CFG.E, dtype=float)
        forward_state(m, x_ctrl, e)
        expected = x_ctrl @ m.cell_encoder.projection + m.pert_encoder(e[None]).data
        np.testing.assert_allclose(m.generator.z.data[0], expected, rtol=1e-14)

    @settings(max_examples=20)
    @given(st.permutations(range(4)))
    def test_cell_permutation_equivariance(self, perm):
        m = build_model("state_genept", CFG)
        x = np.random.default_rng(12).normal(size=(4, CFG.G))
        e = np.random.default_rng(13).normal(size=CFG.E)
        out, out_perm = forward_state(m, x, e).data, forward_state(m, x[list(perm)], e).data
        assert out[list(perm)].tobytes() == out_perm.tobytes()

    def test_shape_errors(self, x_ctrl):
        m = build_model("state_genept", CFG)
        with pytest.raises(ShapeError):
            forward_state(m, x_ctrl[:, :3], np.ones(CFG.E))
        with pytest.raises(ShapeError):
            forward_state(m, x_ctrl, np.ones(CFG.E + 1))


class TestVanilla:
    def test_single_context_is_value_projection(self, db, x_ctrl):
        m = VanillaRAG(CFG)
        m.generator = _Recorder()
        forward_vanilla_rag(m, x_ctrl, "P2", db, 1)
        res = top_k(db, "P2", 1)
        h = m.pert_encoder(db.embeddings[res.candidate_indices]).data
        expected = m.attention.o(m.attention.v(h)).data
        np.testing.assert_allclose(m.generator.z.data[0], np.broadcast_to(expected, (4, CFG.d)),
                                   rtol=1e-13, atol=1e-15)

    def test_candidates_ignore_cells(self, db):
        m = VanillaRAG(CFG)
        seen = []
        orig = m.attention.__call__

        def spy(q, kv):
            seen.append(ad.as_tensor(kv).data.copy())
            return orig(q, kv)

        m.attention = spy
        rng = np.random.default_rng(0)
        for _ in range(3):
            forward_vanilla_rag(m, rng.normal(size=(4, CFG.G)), "P5", db, 3)
        assert all(s.tobytes() == seen[0].tobytes() for s in seen)

    def test_empty_context(self, x_ctrl):
        m = VanillaRAG(CFG)
        batch = Batch(x_ctrl[None], np.ones((1, CFG.E)), np.zeros((1, 0, CFG.E)))
        with pytest.raises(ShapeError):
            m.forward(batch)

    def test_k_too_large(self, db, x_ctrl):
        with pytest.raises(ValueError):
            forward_vanilla_rag(VanillaRAG(CFG), x_ctrl, "P0", db, 9)


class TestPTRAG:
    def test_all_ones_equals_unselected_sum(self, db, x_ctrl):
        m = PTRAG(CFG)
        m.generator = _Recorder()
        forward_pt_rag(m, x_ctrl, "P1", db, 3, deterministic_noise=True, force_mask=np.ones((1, 4, 3)))
        # independent ablation: every candidate projected and summed, no selector
        h_c = x_ctrl @ m.cell_encoder.projection
        h_p = m.pert_encoder(db.embeddings[db.index_of("P1")][None]).data[0]
        ctx = m.pert_encoder(db.embeddings[top_k(db, "P1", 3).candidate_indices]).data
        expected = np.zeros((4, CFG.d))
        for s in range(4):
            for k in range(3):
                expected[s] += m.proj(np.concatenate([h_c[s], h_p, ctx[k]])[None]).data[0]
        np.testing.assert_allclose(m.generator.z.data[0], expected, rtol=1e-12, atol=1e-14)

    def test_all_zeros_is_generator_of_zero(self, db, x_ctrl):
        m = PTRAG(CFG)
        pred, mask = forward_pt_rag(m, x_ctrl, "P1", db, 3, deterministic_noise=True,
                                    force_mask=np.zeros((1, 4, 3)))
        assert mask.selected_count == 0.0
        assert pred.data.tobytes() == m.generator(np.zeros((4, CFG.d))).data.tobytes()

    def test_mask_shape_and_values(self, db, x_ctrl):
        pred, mask = forward_pt_rag(PTRAG(CFG), x_ctrl, "P3", db, 3, np.random.default_rng(0))
        assert pred.shape == (4, CFG.G) and mask.hard.shape == (1, 4, 3)
        assert set(np.unique(mask.hard)) <= {0.0, 1.0}

    def test_selection_depends_on_cell(self, db):
        m = PTRAG(CFG)
        x = np.random.default_rng(1).normal(size=(4, CFG.G)) * 5
        ctx = db.embeddings[top_k(db, "P3", 3).candidate_indices]
        batch = Batch(x[None], db.embeddings[3][None], ctx[None])
        logits = m.selection_logits(batch).data
        assert not np.allclose(logits[0, 0], logits[0, 1])

    def test_relaxed_uses_soft_weights(self, db, x_ctrl):
        m = PTRAG(CFG)
        m.generator = _Recorder()
        ctx = db.embeddings[top_k(db, "P3", 3).candidate_indices]
        batch = Batch(x_ctrl[None], db.embeddings[3][None], ctx[None])
        _, mask = m.forward(batch, deterministic_noise=True, relaxed=True)
        h = m.proj(m.triplets(batch)).data
        np.testing.assert_allclose(m.generator.z.data, (mask.soft[..., None] * h).sum(-2), rtol=1e-13)


class TestLoss:
    def test_identical_clouds(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        assert loss(x, x).dist == 0.0

    def test_two_point_clouds(self):
        assert loss(np.zeros((2, 1)), np.ones((2, 1))).dist == 2.0

    def test_all_ones_mask(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 3))
        y = x + 1.0
        res = loss(x, y, _mask(np.ones((2, 5, 4))), 0.1)
        assert res.sparse == 1.0 and res.selected_count == 4.0
        assert res.total == pytest.approx(res.dist + 0.1, abs=1e-12)

    @given(st.integers(0, 10_000), st.floats(0, 2))
    def test_decomposition_and_symmetry(self, seed, lam):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 6, 3))
        res = loss(a, b, _mask((rng.random((2, 6, 4)) < 0.5).astype(float)), lam)
        assert abs(res.total - (res.dist + lam * res.sparse)) <= 1e-12
        assert 0.0 <= res.sparse <= 1.0
        assert loss(a, b).dist == loss(b, a).dist

    def test_single_cell_rejected(self):
        with pytest.raises(ValueError):
            loss(np.zeros((1, 3)), np.zeros((1, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_gradient_reaches_selector(self, db, x_ctrl):
        m = PTRAG(CFG)
        pred, mask = forward_pt_rag(m, x_ctrl, "P1", db, 3, np.random.default_rng(0))
        ad.backward(loss(pred, x_ctrl + 1.0, mask, 0.1).tensor)
        grads = [p.grad for name, p in m.named_parameters() if name.startswith("score_mlp")]
        assert all(g is not None and np.all(np.isfinite(g)) for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)
