import io
import json

import numpy as np
import pytest

from sharedattn.scene_synth import (
    ConfigError,
    GeneratorConfig,
    SceneParseError,
    decode_scene,
    encode_scene,
    generate_dataset,
    generate_scene,
    read_scenes,
    render_gt_heatmap,
    scene_rng,
    summarize,
    transform_scene,
    write_scenes,
)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(GeneratorConfig(), 300, seed=11)


def test_forced_negative():
    cfg = GeneratorConfig(positive_fraction=0.0)
    for s in generate_dataset(cfg, 50, seed=3):
        assert s.groups == []
        assert not s.is_positive


def test_two_persons_one_group():
    cfg = GeneratorConfig(positive_fraction=1.0, max_persons=2, max_groups=1)
    for s in generate_dataset(cfg, 20, seed=5):
        assert len(s.groups) == 1
        assert s.groups[0].members == frozenset({0, 1})


def test_unsatisfiable_config():
    with pytest.raises(ConfigError):
        generate_scene(GeneratorConfig(max_persons=1, min_persons=1, positive_fraction=0.5), scene_rng(0, 0))
    with pytest.raises(ConfigError):
        GeneratorConfig(image_grid=(4, 32)).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(gaussian_sigma=0.0).validate()


def test_positive_fraction_matches_videocoatt_rate():
    scenes = generate_dataset(GeneratorConfig(image_grid=(8, 8), grid_channels=1), 10_000, seed=2024)
    frac = summarize(scenes).positive_fraction
    assert abs(frac - 0.435) <= 0.02


def test_childplay_preset_is_imbalanced():
    scenes = generate_dataset(GeneratorConfig.childplay_like(image_grid=(8, 8), grid_channels=1), 2000, seed=1)
    assert abs(summarize(scenes).positive_fraction - 0.073) < 0.02


def test_group_invariants(scenes):
    for s in scenes:
        n = len(s.persons)
        for g in s.groups:
            assert len(g.members) >= 2
            assert all(0 <= m < n for m in g.members)
            x0, y0, x1, y1 = g.sa_box
            assert x0 <= g.sa_point[0] <= x1 and y0 <= g.sa_point[1] <= y1
            for m in g.members:
                assert s.persons[m].gaze_target == g.sa_point
        for p in s.persons:
            x0, y0, x1, y1 = p.head_box
            assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1
            assert (p.gaze_target is not None) == p.in_frame


def test_head_boxes_do_not_overlap_much(scenes):
    from sharedattn.scene_synth import _box_overlap

    for s in scenes:
        boxes = [p.head_box for p in s.persons]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert _box_overlap(boxes[i], boxes[j]) <= 0.5


def test_determinism():
    cfg = GeneratorConfig()
    a = generate_dataset(cfg, 20, seed=9)
    b = generate_dataset(cfg, 20, seed=9)
    assert a == b
    buf_a, buf_b = io.BytesIO(), io.BytesIO()
    write_scenes(a, buf_a)
    write_scenes(b, buf_b)
    assert buf_a.getvalue() == buf_b.getvalue()


def test_scene_is_pure_in_index():
    cfg = GeneratorConfig()
    whole = generate_dataset(cfg, 10, seed=4)
    tail = generate_dataset(cfg, 5, seed=4, offset=5)
    assert whole[5:] == tail


def test_appearance_carries_gaze_direction(scenes):
    angle_err, log_ratio = [], []
    for s in scenes:
        for p in s.persons:
            if p.in_frame:
                dx, dy = np.subtract(p.gaze_target, p.head_center)
                ux, uy, dist = p.appearance[:3]
                assert ux**2 + uy**2 == pytest.approx(1.0)
                angle_err.append(np.angle(complex(ux, uy) / complex(dx, dy)))
                log_ratio.append(np.log(dist / np.hypot(dx, dy)))
    cfg = GeneratorConfig()
    assert np.std(angle_err) == pytest.approx(cfg.gaze_noise, rel=0.1)
    assert np.std(log_ratio) == pytest.approx(cfg.depth_noise, rel=0.1)
    assert abs(np.mean(angle_err)) < 0.01


def test_noise_free_appearance_is_exact():
    cfg = GeneratorConfig(gaze_noise=0.0, depth_noise=0.0, positive_fraction=1.0)
    for s in generate_dataset(cfg, 20, seed=2):
        for p in s.persons:
            if p.in_frame:
                disp = np.subtract(p.gaze_target, p.head_center)
                np.testing.assert_allclose(p.appearance[:2] * p.appearance[2], disp, atol=1e-12)


class TestTransform:
    @pytest.mark.parametrize("flags", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 1)])
    def test_geometry_moves_together(self, scenes, flags):
        fx, fy, tr = flags
        for s in scenes[:30]:
            t = transform_scene(s, fx, fy, tr)
            for p, q in zip(s.persons, t.persons):
                assert q.head_box[0] < q.head_box[2] and q.head_box[1] < q.head_box[3]
                if p.in_frame:
                    # the encoded direction still points from head to target
                    d = np.subtract(q.gaze_target, q.head_center)
                    u = q.appearance[:2]
                    assert np.dot(d, u) / np.linalg.norm(d) > 0.8
                np.testing.assert_array_equal(p.appearance[2:], q.appearance[2:])
            assert [g.members for g in s.groups] == [g.members for g in t.groups]

    def test_grid_follows_points(self, scenes):
        # each group's SA point sits on an object blob in channel 0
        for s in scenes[:30]:
            t = transform_scene(s, True, False, True)
            H, W = t.grid.shape[:2]
            for g in t.groups:
                x, y = g.sa_point
                assert t.grid[min(int(y * H), H - 1), min(int(x * W), W - 1), 0] > 0.3

    def test_involution(self, scenes):
        s = scenes[0]
        back = transform_scene(transform_scene(s, True, True, False), True, True, False)
        for p, q in zip(s.persons, back.persons):
            np.testing.assert_allclose(p.head_box, q.head_box, atol=1e-12)
            np.testing.assert_allclose(p.appearance, q.appearance, atol=1e-12)
        np.testing.assert_array_equal(s.grid, back.grid)

    def test_transpose_needs_square_grid(self):
        s = generate_dataset(GeneratorConfig(image_grid=(8, 12)), 1, seed=0)[0]
        transform_scene(s, flip_x=True)
        with pytest.raises(ConfigError):
            transform_scene(s, transpose=True)


class TestHeatmap:
    def test_center_peak(self):
        hm = render_gt_heatmap((0.5, 0.5), 0.1, 9, 9)
        assert hm.max() == 1.0
        assert np.unravel_index(hm.argmax(), hm.shape) == (4, 4)
        assert hm.min() >= 0

    def test_delta_limit(self):
        hm = render_gt_heatmap((0.3, 0.6), 1e-6, 16, 16)
        assert hm.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("size", [9, 10, 11, 30])
    def test_mirror_symmetry(self, size):
        # sizes where 0.25 / 0.75 fall strictly inside a cell
        a = render_gt_heatmap((0.25, 0.25), 0.07, size, size)
        b = render_gt_heatmap((0.75, 0.75), 0.07, size, size)
        np.testing.assert_allclose(a, np.rot90(b, 2), atol=1e-15)

    def test_translation_by_whole_cells(self):
        H = W = 32
        a = render_gt_heatmap((10.5 / W, 12.5 / H), 0.05, H, W)
        b = render_gt_heatmap((13.5 / W, 14.5 / H), 0.05, H, W)
        np.testing.assert_allclose(a[:-2, :-3], b[2:, 3:], atol=1e-15)

    def test_clamp_and_reject(self, caplog):
        hm = render_gt_heatmap((1.0 + 5e-7, 0.5), 0.05, 8, 8)
        assert hm[4, 7] == 1.0
        assert "clamping" in caplog.text
        with pytest.raises(ValueError):
            render_gt_heatmap((1.1, 0.5), 0.05, 8, 8)


class TestSerialization:
    def test_round_trip(self, scenes):
        for s in scenes[:50]:
            assert decode_scene(encode_scene(s)) == s

    def test_floats_are_lossless(self, scenes):
        s = scenes[0]
        back = decode_scene(encode_scene(s))
        for p, q in zip(s.persons, back.persons):
            assert p.appearance.tobytes() == q.appearance.tobytes()

    def test_missing_persons(self, scenes):
        rec = json.loads(encode_scene(scenes[0]))
        del rec["persons"]
        with pytest.raises(SceneParseError) as exc:
            decode_scene(json.dumps(rec))
        assert exc.value.field == "persons"

    def test_bad_nested_field_is_named(self, scenes):
        rec = json.loads(encode_scene(scenes[0]))
        rec["persons"][0]["head_box"] = [0.1, 0.2]
        with pytest.raises(SceneParseError, match=r"persons\[0\]\.head_box"):
            decode_scene(json.dumps(rec))

    def test_stream_order(self):
        cfg = GeneratorConfig(image_grid=(8, 8), grid_channels=2)
        scenes = generate_dataset(cfg, 1000, seed=6)
        buf = io.BytesIO()
        assert write_scenes(scenes, buf) == 1000
        buf.seek(0)
        back = list(read_scenes(buf))
        assert [s.scene_id for s in back] == [s.scene_id for s in scenes]
        assert back == scenes
