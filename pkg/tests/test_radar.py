import numpy as np
import pytest

from cdaudit.numerics import make_rng
from cdaudit.radar import (ExtractionError, LlmExtractionError, LlmEndpoint,
                           RadarStyle, axis_angles, extract_kstate_canny,
                           extract_kstate_llm, load_prompt, mae, render_radar,
                           roundtrip, vertex_positions)

STYLE = RadarStyle()


class TestStyle:
    def test_defaults(self):
        assert STYLE.image_size == 512
        assert STYLE.max_radius == pytest.approx(0.42 * 512)
        assert STYLE.ring_levels[-1] == 1.0

    def test_bad_ring_levels(self):
        with pytest.raises(ValueError):
            RadarStyle(ring_levels=(0.4, 0.2, 1.0))
        with pytest.raises(ValueError):
            RadarStyle(ring_levels=(0.2, 0.8))


class TestRender:
    def test_shape_and_background(self):
        img = render_radar(np.full(8, 0.5), STYLE)
        assert img.shape == (512, 512, 3)
        assert tuple(img[2, 2]) == (255, 255, 255)

    def test_full_polygon_touches_outer_ring(self):
        img = render_radar(np.ones(8), STYLE)
        for px, py in vertex_positions(np.ones(8), STYLE):
            patch = img[int(py) - 2:int(py) + 3, int(px) - 2:int(px) + 3]
            assert (patch == (0, 128, 0)).all(axis=2).any()

    def test_zero_polygon_degenerates_to_center(self):
        img = render_radar(np.zeros(8), STYLE)
        greens = np.argwhere((img == (0, 128, 0)).all(axis=2))
        cx, cy = STYLE.center
        assert len(greens) > 0
        assert np.abs(greens - [cy, cx]).max() <= 3

    def test_half_vector_vertices_at_half_radius(self):
        img = render_radar(np.full(8, 0.5), STYLE)
        for px, py in vertex_positions(np.full(8, 0.5), STYLE):
            patch = img[int(py) - 1:int(py) + 2, int(px) - 1:int(px) + 2]
            assert (patch == (0, 128, 0)).all(axis=2).any()

    def test_k_below_three_rejected(self):
        with pytest.raises(ValueError):
            render_radar(np.array([0.5, 0.5]))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            render_radar(np.array([0.5, 1.2, 0.3]))

    def test_axis_zero_points_up_clockwise(self):
        pos = vertex_positions(np.ones(4), STYLE)
        cx, cy = STYLE.center
        assert pos[0][0] == pytest.approx(cx) and pos[0][1] < cy   # 12 o'clock
        assert pos[1][0] > cx and pos[1][1] == pytest.approx(cy)   # 3 o'clock


class TestExtraction:
    def test_full_vector_roundtrip(self):
        res = extract_kstate_canny(render_radar(np.ones(8), STYLE), 8, STYLE)
        assert np.abs(res.estimates - 1.0).max() <= 0.02
        assert not res.flagged_axes

    def test_hundred_random_vectors_within_tolerance(self):
        rng = make_rng(5)
        vectors = rng.uniform(0.05, 1.0, size=(100, 8))
        _, maes = roundtrip(vectors, STYLE)
        assert maes.mean() <= 0.03
        assert maes.max() <= 0.05

    @pytest.mark.parametrize("n_axes", [5, 8, 11, 16])
    def test_roundtrip_across_axis_counts(self, n_axes):
        rng = make_rng(100 + n_axes)
        vectors = rng.uniform(0.05, 1.0, size=(20, n_axes))
        _, maes = roundtrip(vectors, STYLE)
        assert maes.max() <= 0.03

    def test_gray_only_image_fails(self):
        img = render_radar(np.full(8, 0.6), STYLE).copy()
        green = (img[:, :, 1].astype(int) > img[:, :, 0].astype(int) + 40) & \
                (img[:, :, 1].astype(int) > img[:, :, 2].astype(int) + 40)
        img[green] = (255, 255, 255)  # erase the polygon, keep the rings
        with pytest.raises(ExtractionError):
            extract_kstate_canny(img, 8, STYLE)

    def test_rings_never_read_as_vertices(self):
        # rings sit at 0.2..1.0; a tiny polygon must not inherit their radii
        res = extract_kstate_canny(render_radar(np.full(8, 0.1), STYLE), 8, STYLE)
        assert res.estimates.max() <= 0.15

    def test_monotone_single_axis_sweep(self):
        base = np.full(8, 0.5)
        prev = -1.0
        for value in np.arange(0.1, 1.001, 0.1):
            vec = base.copy()
            vec[3] = value
            est = extract_kstate_canny(render_radar(vec, STYLE), 8, STYLE).estimates[3]
            assert est >= prev - 1e-9
            prev = est

    def test_confidence_counts_populated(self):
        res = extract_kstate_canny(render_radar(np.full(8, 0.7), STYLE), 8, STYLE)
        assert res.per_axis_confidence.min() >= 1
        assert res.method == "canny"


class TestMae:
    def test_identical_vectors(self):
        assert mae([0.2, 0.9], [0.2, 0.9]) == 0.0

    def test_hand_case(self):
        assert mae([0.5, 0.5], [0.4, 0.6]) == pytest.approx(0.1)

    def test_batch_equals_mean_of_per_vector(self):
        rng = make_rng(9)
        est = rng.random((10, 8))
        ref = rng.random((10, 8))
        per_vec = [mae(est[i], ref[i]) for i in range(10)]
        assert mae(est, ref) == pytest.approx(np.mean(per_vec))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mae([0.1], [0.1, 0.2])


class TestLlmClient:
    def test_prompts_ship_verbatim(self):
        general = load_prompt("general")
        in_context = load_prompt("in_context")
        assert "0.2, 0.4, 0.6, 0.8, and 1.0" in general
        assert "interpretation approach" in in_context
        with pytest.raises(ValueError):
            load_prompt("mystery")

    def test_missing_env_rejected(self, monkeypatch):
        monkeypatch.delenv("CDAUDIT_LLM_URL", raising=False)
        monkeypatch.delenv("CDAUDIT_LLM_MODEL", raising=False)
        with pytest.raises(LlmExtractionError):
            LlmEndpoint.from_env()

    def test_unreachable_endpoint_surfaces_transport_error(self):
        img = render_radar(np.full(5, 0.5), STYLE)
        endpoint = LlmEndpoint(url="http://127.0.0.1:1/v1/chat/completions",
                               model="probe")
        with pytest.raises(LlmExtractionError, match="request failed"):
            extract_kstate_llm(img, 5, endpoint=endpoint, timeout=2.0)

    def test_reply_parsing(self, monkeypatch):
        import requests

        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"choices": [{"message": {"content":
                        "c1: 0.65, c2: 0.40, c3: 0.79, c4: 0.92, c5: 1.3"}}]}

        monkeypatch.setattr(requests, "post", lambda *a, **kw: FakeResponse())
        img = render_radar(np.full(5, 0.5), STYLE)
        endpoint = LlmEndpoint(url="http://example.invalid", model="m")
        res = extract_kstate_llm(img, 5, endpoint=endpoint)
        assert res.method == "llm"
        assert np.allclose(res.estimates, [0.65, 0.40, 0.79, 0.92, 1.0])

    def test_too_few_numbers_rejected(self, monkeypatch):
        import requests

        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"choices": [{"message": {"content": "about 0.5"}}]}

        monkeypatch.setattr(requests, "post", lambda *a, **kw: FakeResponse())
        img = render_radar(np.full(5, 0.5), STYLE)
        endpoint = LlmEndpoint(url="http://example.invalid", model="m")
        with pytest.raises(LlmExtractionError, match="numbers"):
            extract_kstate_llm(img, 5, endpoint=endpoint)


def test_axis_angles_cover_circle():
    ang = axis_angles(8)
    assert ang[0] == 0.0
    assert np.allclose(np.diff(ang), 45.0)
