"""Tests for attention module."""

import math

import numpy as np
import pytest

from src.attention import (
    AttentionLayer,
    FrameQuery,
    blend_global,
    compose_regions,
    cross_attention,
    frame_cross_attention,
    make_query,
    map_frames,
    masked_subobject_attention,
    project_reference,
    reference_frame_attention,
    spatio_temporal_cross_attention,
    temporal_concat,
)
from src.encoders import RefContext, TextEmbedding, encode_text
from src.numerics import DimensionError
from src.plan import (
    Box,
    PromptPlan,
    RegionMask,
    SubObject,
    TemporalSegment,
    masks_for_segment,
    rasterize_mask,
    segment_for_frame,
    validate_plan,
)

D_CONTEXT = 16
D = 8


def loop_attend(q, k, v):
    q = q.astype(np.float64)
    k = k.astype(np.float64)
    v = v.astype(np.float64)
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [sum(q[i, r] * k[j, r] for r in range(q.shape[1])) / math.sqrt(q.shape[1]) for j in range(k.shape[0])]
        top = max(logits)
        weights = [math.exp(x - top) for x in logits]
        total = sum(weights)
        for j in range(k.shape[0]):
            out[i] += weights[j] / total * v[j]
    return out


def random_query(rng, h, w, d=D):
    return FrameQuery(q=rng.standard_normal((h * w, d)).astype(np.float32), resolution=(h, w))


def random_embedding(rng, tokens, dim=D_CONTEXT):
    values = rng.standard_normal((tokens, dim)).astype(np.float32)
    return TextEmbedding(tokens=tokens, dim=dim, values=values)


def random_mask(rng, h, w):
    return RegionMask(h, w, (rng.random((h, w)) < 0.5).astype(np.uint8))


def two_object_segment(start, prompt="a scene", left="a cat", right="a dog"):
    return TemporalSegment(start, prompt, (
        SubObject(left, Box(0, 0, 0.5, 1)),
        SubObject(right, Box(0.5, 0, 0.5, 1)),
    ))


@pytest.fixture
def layer():
    return AttentionLayer.from_seed(3, d_model=12, d_context=D_CONTEXT, d=D)


class TestAttentionLayer:
    """Test projection containers."""

    def test_from_seed_shapes(self, layer):
        """Test seeded projection shapes."""
        assert layer.w_q.shape == (12, D)
        assert layer.w_k.shape == (D_CONTEXT, D)
        assert (layer.d_model, layer.d_context, layer.d) == (12, D_CONTEXT, D)

    def test_mismatched_projections(self):
        """Test K and V must share a shape."""
        with pytest.raises(DimensionError):
            AttentionLayer(w_q=np.zeros((4, 8)), w_k=np.zeros((6, 8)), w_v=np.zeros((6, 4)))

    def test_heads_must_divide(self):
        """Test the head count must divide d."""
        with pytest.raises(DimensionError, match="heads"):
            AttentionLayer.from_seed(0, 4, 4, 6, heads=4)

    def test_make_query(self, layer):
        """Test feature maps flatten row-major before projection."""
        features = np.random.default_rng(0).standard_normal((12, 2, 3)).astype(np.float32)
        q = make_query(features, layer)

        assert q.resolution == (2, 3)
        expected = features.reshape(12, 6).T.astype(np.float64) @ layer.w_q.astype(np.float64)
        np.testing.assert_allclose(q.q, expected, atol=1e-5)

    def test_query_resolution_mismatch(self):
        """Test query rows must match the resolution."""
        with pytest.raises(DimensionError):
            FrameQuery(q=np.zeros((5, D), dtype=np.float32), resolution=(2, 2))


class TestCompositionalOps:
    """Test the four compositional cross-attention operations against loop oracles."""

    def test_cross_attention_value_table(self):
        """Test a seeded 4-position, 3-token case."""
        rng = np.random.default_rng(1)
        layer = AttentionLayer.from_seed(9, d_model=D, d_context=D_CONTEXT, d=D)
        q = random_query(rng, 2, 2)
        emb = random_embedding(rng, 3)

        out = cross_attention(q, emb, layer)

        k = emb.values.astype(np.float64) @ layer.w_k
        v = emb.values.astype(np.float64) @ layer.w_v
        np.testing.assert_allclose(out, loop_attend(q.q, k, v), atol=1e-5)

    def test_equation_oracles(self):
        """Test every op on seeded random instances up to 8x8 and 4 tokens."""
        rng = np.random.default_rng(2)
        for n in range(100):
            layer = AttentionLayer.from_seed(n, d_model=D, d_context=D_CONTEXT, d=D)
            h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            q = random_query(rng, h, w)
            objects = int(rng.integers(1, 4))
            embs = [random_embedding(rng, int(rng.integers(1, 5))) for _ in range(objects)]
            masks = [random_mask(rng, h, w) for _ in range(objects)]

            parts = [masked_subobject_attention(q, e, m, layer) for e, m in zip(embs, masks)]
            oracle_parts = []
            for e, m in zip(embs, masks):
                k = e.values.astype(np.float64) @ layer.w_k
                v = e.values.astype(np.float64) @ layer.w_v
                oracle_parts.append(loop_attend(q.q, k, v) * m.values.reshape(-1, 1))
            for part, oracle in zip(parts, oracle_parts):
                np.testing.assert_allclose(part, oracle, atol=1e-5)

            region = compose_regions(parts)
            np.testing.assert_allclose(region, sum(oracle_parts), atol=1e-5)

            original = rng.standard_normal(region.shape).astype(np.float32)
            alpha = float(rng.random())
            blended = blend_global(original, region, alpha)
            np.testing.assert_allclose(blended, alpha * original + (1 - alpha) * region, atol=1e-5)

            stacked = temporal_concat([original, region, blended])
            np.testing.assert_array_equal(stacked[1], region)

    def test_masked_rows_zero(self, layer):
        """Test rows outside a half-plane mask are zero and inside match plain attention."""
        rng = np.random.default_rng(3)
        q = random_query(rng, 4, 4)
        emb = random_embedding(rng, 3)
        mask = rasterize_mask(Box(0, 0, 0.5, 1), 4, 4)

        out = masked_subobject_attention(q, emb, mask, layer)
        plain = cross_attention(q, emb, layer)

        inside = mask.flat().astype(bool)
        assert np.all(out[~inside] == 0.0)
        np.testing.assert_array_equal(out[inside], plain[inside])

    def test_mask_resolution_mismatch(self, layer):
        """Test masks must match the query grid."""
        rng = np.random.default_rng(4)
        with pytest.raises(DimensionError, match="mask"):
            masked_subobject_attention(random_query(rng, 4, 4), random_embedding(rng, 2),
                                       rasterize_mask(Box(0, 0, 1, 1), 2, 2), layer)

    def test_disjoint_parts_select_governing_object(self):
        """Test each position carries exactly its own sub-object's values."""
        a = np.full((4, 2), 1.0, dtype=np.float32) * np.array([[1], [1], [0], [0]], dtype=np.float32)
        b = np.full((4, 2), 2.0, dtype=np.float32) * np.array([[0], [0], [1], [1]], dtype=np.float32)
        np.testing.assert_array_equal(compose_regions([a, b]), [[1, 1], [1, 1], [2, 2], [2, 2]])

    def test_compose_needs_parts(self):
        """Test an empty part list is rejected."""
        with pytest.raises(ValueError):
            compose_regions([])

    def test_blend_mean(self):
        """Test alpha=0.5 is the elementwise mean."""
        a = np.array([[1.0, 3.0]], dtype=np.float32)
        b = np.array([[3.0, 5.0]], dtype=np.float32)
        np.testing.assert_array_equal(blend_global(a, b, 0.5), [[2.0, 4.0]])

    def test_blend_reductions_exact(self):
        """Test alpha=1 and alpha=0 reproduce their inputs bit-for-bit."""
        rng = np.random.default_rng(5)
        for _ in range(50):
            shape = (int(rng.integers(1, 65)), D)
            original = rng.standard_normal(shape).astype(np.float32)
            region = rng.standard_normal(shape).astype(np.float32)
            assert blend_global(original, region, 1.0).tobytes() == original.tobytes()
            assert blend_global(original, region, 0.0).tobytes() == region.tobytes()

    def test_blend_renormalized(self):
        """Test uncovered positions keep the original attention."""
        original = np.ones((4, 2), dtype=np.float32)
        region = np.zeros((4, 2), dtype=np.float32)
        coverage = RegionMask(2, 2, np.array([[1, 0], [0, 0]]))

        out = blend_global(original, region, 0.25, mode="renormalized", coverage=coverage)

        np.testing.assert_allclose(out[0], 0.25)
        np.testing.assert_array_equal(out[1:], 1.0)

    def test_blend_invalid(self):
        """Test alpha range, mode name and coverage requirement."""
        a = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="alpha"):
            blend_global(a, a, 1.5)
        with pytest.raises(ValueError, match="blend mode"):
            blend_global(a, a, 0.5, mode="other")
        with pytest.raises(ValueError, match="coverage"):
            blend_global(a, a, 0.5, mode="renormalized")

    def test_temporal_concat_order(self):
        """Test five random frames stack in order."""
        rng = np.random.default_rng(6)
        frames = [rng.standard_normal((9, D)).astype(np.float32) for _ in range(5)]
        np.testing.assert_array_equal(temporal_concat(frames), np.stack(frames))

    def test_temporal_concat_shape_mismatch(self):
        """Test frames must share a shape."""
        with pytest.raises(DimensionError):
            temporal_concat([np.zeros((4, 2)), np.zeros((3, 2))])


class TestSpatioTemporal:
    """Test the full per-frame composition over a plan."""

    @pytest.fixture
    def plan(self):
        return validate_plan(PromptPlan(
            total_frames=16,
            segments=(two_object_segment(0), two_object_segment(8, "a later scene", "a bird", "a dog")),
            alpha=0.3,
        ))

    def test_matches_manual_chain(self):
        """Test the pipeline equals the chain of its four operations on random plans."""
        rng = np.random.default_rng(7)
        layer = AttentionLayer.from_seed(11, d_model=D, d_context=D_CONTEXT, d=D)
        for _ in range(10):
            frames = int(rng.integers(1, 5))
            objects = int(rng.integers(1, 4))
            width = 1.0 / objects
            seg = TemporalSegment(0, "a wide scene", tuple(
                SubObject(f"object {j}", Box(j * width, 0, width, 1)) for j in range(objects)
            ))
            plan = validate_plan(PromptPlan(total_frames=frames, segments=(seg,), alpha=float(rng.random())))
            queries = [random_query(rng, 8, 8) for _ in range(frames)]

            out = spatio_temporal_cross_attention(queries, plan, layer, workers=1)

            masks, _ = masks_for_segment(seg, 8, 8)
            for t, q in enumerate(queries):
                original = cross_attention(q, encode_text(seg.global_prompt, D_CONTEXT), layer)
                parts = [
                    masked_subobject_attention(q, encode_text(o.prompt, D_CONTEXT), m, layer)
                    for o, m in zip(seg.sub_objects, masks)
                ]
                expected = blend_global(original, compose_regions(parts), plan.alpha)
                np.testing.assert_allclose(out[t], expected, atol=1e-6)

    def test_second_segment_changes_only_later_frames(self, plan):
        """Test frames before the second segment match a one-segment plan."""
        rng = np.random.default_rng(8)
        layer = AttentionLayer.from_seed(12, d_model=D, d_context=D_CONTEXT, d=D)
        queries = [random_query(rng, 4, 4) for _ in range(16)]
        single = validate_plan(PromptPlan(total_frames=16, segments=plan.segments[:1], alpha=plan.alpha))

        two = spatio_temporal_cross_attention(queries, plan, layer, workers=1)
        one = spatio_temporal_cross_attention(queries, single, layer, workers=1)

        np.testing.assert_array_equal(two[:8], one[:8])
        for t in range(8, 16):
            assert not np.array_equal(two[t], one[t])

    def test_region_locality(self):
        """Test with alpha=0 a prompt change only moves rows inside that object's mask."""
        rng = np.random.default_rng(9)
        for n in range(50):
            layer = AttentionLayer.from_seed(100 + n, d_model=D, d_context=D_CONTEXT, d=D)
            q = random_query(rng, 8, 8)
            base = validate_plan(PromptPlan(1, (two_object_segment(0),), alpha=0.0))
            changed = validate_plan(PromptPlan(1, (two_object_segment(0, right=f"a dog number {n}"),), alpha=0.0))

            a = frame_cross_attention(q, base, 0, layer)
            b = frame_cross_attention(q, changed, 0, layer)

            outside = rasterize_mask(Box(0.5, 0, 0.5, 1), 8, 8).flat() == 0
            assert np.array_equal(a[outside], b[outside])
            assert not np.array_equal(a[~outside], b[~outside])

    def test_workers_do_not_change_output(self, plan):
        """Test thread-pool evaluation is bit-identical to the serial loop."""
        rng = np.random.default_rng(10)
        layer = AttentionLayer.from_seed(13, d_model=D, d_context=D_CONTEXT, d=D)
        queries = [random_query(rng, 4, 4) for _ in range(16)]

        serial = spatio_temporal_cross_attention(queries, plan, layer, workers=1)
        pooled = spatio_temporal_cross_attention(queries, plan, layer, workers=4)

        assert serial.tobytes() == pooled.tobytes()

    def test_frame_offset(self, plan):
        """Test a chunk starting mid-plan uses the segments of its absolute frames."""
        rng = np.random.default_rng(14)
        layer = AttentionLayer.from_seed(14, d_model=D, d_context=D_CONTEXT, d=D)
        queries = [random_query(rng, 4, 4) for _ in range(8)]

        chunk = spatio_temporal_cross_attention(queries, plan, layer, frame_offset=8, workers=1)
        for t, q in enumerate(queries):
            assert segment_for_frame(plan, 8 + t).global_prompt == "a later scene"
            np.testing.assert_array_equal(chunk[t], frame_cross_attention(q, plan, 8 + t, layer))

    def test_trace_keys(self, plan):
        """Test the trace holds every intermediate of every frame."""
        rng = np.random.default_rng(15)
        layer = AttentionLayer.from_seed(15, d_model=D, d_context=D_CONTEXT, d=D)
        trace = {}
        out = spatio_temporal_cross_attention([random_query(rng, 4, 4) for _ in range(2)], plan, layer,
                                              workers=2, trace=trace)

        assert sorted(trace) == sorted(
            f"frame{t:04d}_{name}" for t in range(2)
            for name in ("original", "object00", "object01", "region", "blended")
        )
        np.testing.assert_array_equal(trace["frame0001_blended"], out[1])

    def test_map_frames_preserves_order(self):
        """Test pooled mapping keeps item order."""
        assert map_frames(lambda x: x * x, list(range(10)), workers=3) == [x * x for x in range(10)]


class TestReferenceAttention:
    """Test reference frame attention."""

    @pytest.fixture
    def ref_layer(self):
        return AttentionLayer.from_seed(21, d_model=D, d_context=24, d=D)

    def make_ctx(self, rng, object_mask, frames=2):
        h, w = object_mask.height, object_mask.width
        return RefContext(
            x_ref=rng.standard_normal((frames * h * w, 24)).astype(np.float32),
            object_mask=object_mask,
            frame_span=(0, frames),
        )

    def test_matches_loop_oracle(self, ref_layer):
        """Test a seeded half-masked reference case against loops."""
        rng = np.random.default_rng(16)
        for _ in range(100):
            h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            object_mask = random_mask(rng, h, w)
            current = random_mask(rng, h, w)
            ctx = self.make_ctx(rng, object_mask)
            q = random_query(rng, h, w)

            out = reference_frame_attention(q, ctx, current, ref_layer)

            x = ctx.x_ref.astype(np.float64) * np.tile(object_mask.values.reshape(-1), 2)[:, None]
            k = x @ ref_layer.w_k
            v = x @ ref_layer.w_v
            rows = current.values.reshape(-1, 1)
            oracle = loop_attend(q.q * rows, k, v) * rows
            np.testing.assert_allclose(out, oracle, atol=1e-5)

    def test_locality(self, ref_layer):
        """Test changing x_ref moves rows inside the current mask only."""
        rng = np.random.default_rng(17)
        object_mask = rasterize_mask(Box(0, 0, 1, 1), 4, 4)
        current = rasterize_mask(Box(0, 0, 0.5, 1), 4, 4)
        q = random_query(rng, 4, 4)
        a = reference_frame_attention(q, self.make_ctx(rng, object_mask), current, ref_layer)
        b = reference_frame_attention(q, self.make_ctx(rng, object_mask), current, ref_layer)

        inside = current.flat().astype(bool)
        assert np.all(a[~inside] == 0.0) and np.all(b[~inside] == 0.0)
        assert not np.allclose(a[inside], b[inside])

    def test_masked_reference_rows_ignored(self, ref_layer):
        """Test reference tokens outside the object mask never matter."""
        rng = np.random.default_rng(18)
        object_mask = rasterize_mask(Box(0, 0, 0.5, 1), 4, 4)
        ctx = self.make_ctx(rng, object_mask)
        noisy = ctx.x_ref.copy()
        outside = np.tile(object_mask.flat(), 2) == 0
        noisy[outside] += 10.0
        other = RefContext(x_ref=noisy, object_mask=object_mask, frame_span=(0, 2))
        q = random_query(rng, 4, 4)
        current = rasterize_mask(Box(0, 0, 1, 1), 4, 4)

        np.testing.assert_array_equal(
            reference_frame_attention(q, ctx, current, ref_layer),
            reference_frame_attention(q, other, current, ref_layer),
        )

    def test_precomputed_kv(self, ref_layer):
        """Test passing projected keys and values gives the same result."""
        rng = np.random.default_rng(19)
        mask = rasterize_mask(Box(0, 0, 1, 1), 2, 2)
        ctx = self.make_ctx(rng, mask)
        q = random_query(rng, 2, 2)
        kv = project_reference(ctx, ref_layer)
        np.testing.assert_array_equal(
            reference_frame_attention(q, ctx, mask, ref_layer, kv=kv),
            reference_frame_attention(q, ctx, mask, ref_layer),
        )

    def test_width_mismatch(self, layer):
        """Test x_ref must match the layer key input."""
        rng = np.random.default_rng(20)
        ctx = self.make_ctx(rng, rasterize_mask(Box(0, 0, 1, 1), 2, 2))
        with pytest.raises(DimensionError, match="x_ref"):
            project_reference(ctx, layer)
