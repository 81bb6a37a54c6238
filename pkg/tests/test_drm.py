import numpy as np
import pytest

from xnet.boxes import BBox
from xnet.drm import (
    Displacement,
    build_pyramid,
    drm_decide,
    flow_reposition,
    lk_flow,
    refine_box,
    refine_candidates,
    seed_grid,
)


def textured_image(seed, h=64, w=64):
    rng = np.random.default_rng(seed)
    # mid-frequency texture that LK can lock onto
    base = rng.random((h // 4, w // 4))
    img = np.kron(base, np.ones((4, 4)))
    img += 0.3 * rng.random((h, w))
    return img / img.max()


class TestPyramid:
    def test_level_dims_halve(self):
        pyr = build_pyramid(np.zeros((64, 64)), 3)
        assert [l.shape for l in pyr.levels] == [(64, 64), (32, 32), (16, 16)]

    def test_single_level_keeps_resolution(self):
        img = textured_image(0)
        pyr = build_pyramid(img, 1)
        assert pyr.levels[0].shape == img.shape
        np.testing.assert_array_equal(pyr.levels[0], img)

    def test_constant_image_stays_constant(self):
        pyr = build_pyramid(np.full((32, 32), 0.4), 2)
        for level in pyr.levels:
            np.testing.assert_allclose(level, 0.4, atol=1e-12)

    def test_odd_dims_ceil(self):
        pyr = build_pyramid(np.zeros((33, 65)), 2)
        assert pyr.levels[1].shape == (17, 33)

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            build_pyramid(np.zeros((20, 20)), 3)


class TestLkFlow:
    def test_identical_frames_zero_flow(self):
        img = textured_image(1)
        pyr = build_pyramid(img, 3)
        flows = lk_flow(pyr, pyr, [(32.0, 32.0), (20.0, 40.0)])
        for f in flows:
            assert f is not None
            assert abs(f.dx) < 1e-6 and abs(f.dy) < 1e-6

    def test_constant_images_zero_flow_exact(self):
        pyr = build_pyramid(np.full((64, 64), 0.5), 3)
        flows = lk_flow(pyr, pyr, [(32.0, 32.0)])
        assert flows[0] == Displacement(0.0, 0.0)

    def test_translation_recovered(self):
        errs = []
        for seed in range(20):
            rng = np.random.default_rng(seed + 100)
            dx = int(rng.integers(1, 4)) * int(rng.choice([-1, 1]))
            dy = int(rng.integers(1, 4)) * int(rng.choice([-1, 1]))
            img = textured_image(seed)
            moved = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
            p0 = build_pyramid(img, 3)
            p1 = build_pyramid(moved, 3)
            pts = [(x, y) for x in (24.0, 32.0, 40.0) for y in (24.0, 32.0, 40.0)]
            flows = [f for f in lk_flow(p0, p1, pts, max_flow=10.0) if f is not None]
            assert flows, "all points dropped on a textured translation"
            mx = np.mean([f.dx for f in flows])
            my = np.mean([f.dy for f in flows])
            errs.append(np.hypot(mx - dx, my - dy))
        assert np.mean(errs) < 0.5, f"mean flow error {np.mean(errs):.3f}px"

    def test_rotation_center_is_stationary(self):
        img = textured_image(7, 80, 80)
        cy, cx = 40.0, 40.0
        theta = np.deg2rad(5.0)
        ys, xs = np.mgrid[0:80, 0:80].astype(np.float64)
        # inverse map: sample source at the backward-rotated coordinates
        sy = cy + (ys - cy) * np.cos(theta) - (xs - cx) * np.sin(theta)
        sx = cx + (ys - cy) * np.sin(theta) + (xs - cx) * np.cos(theta)
        from xnet.imageops import bilinear_sample

        rotated = bilinear_sample(img, sy, sx)
        p0 = build_pyramid(img, 3)
        p1 = build_pyramid(rotated, 3)
        (flow,) = lk_flow(p0, p1, [(cx, cy)])
        assert flow is not None
        assert flow.magnitude() < 0.5

    def test_max_flow_drops_runaways(self):
        img = textured_image(3)
        moved = np.roll(img, 6, axis=1)
        p0 = build_pyramid(img, 3)
        p1 = build_pyramid(moved, 3)
        with pytest.raises(RuntimeError, match="untrackable"):
            lk_flow(p0, p1, [(32.0, 32.0)], max_flow=2.0)

    def test_brightness_jump_on_flat_image_is_untrackable(self):
        p0 = build_pyramid(np.full((64, 64), 0.2), 3)
        p1 = build_pyramid(np.full((64, 64), 0.8), 3)
        with pytest.raises(RuntimeError, match="untrackable"):
            lk_flow(p0, p1, [(32.0, 32.0)])

    def test_even_window_rejected(self):
        pyr = build_pyramid(np.zeros((64, 64)), 2)
        with pytest.raises(ValueError, match="odd"):
            lk_flow(pyr, pyr, [(10.0, 10.0)], window=8)


class TestFlowReposition:
    def test_zero_motion_keeps_box(self):
        img = textured_image(11)
        box = BBox(24, 24, 16, 16)
        out, diag = flow_reposition(box, box, img, img)
        assert not diag.untrackable
        assert abs(out.x - box.x) < 1e-6 and abs(out.y - box.y) < 1e-6

    def test_recovers_global_shift(self):
        img = textured_image(12)
        moved = np.roll(img, 4, axis=1)
        box = BBox(24, 24, 16, 16)
        out, diag = flow_reposition(box, box, img, moved)
        assert abs(out.x - (box.x + 4)) < 0.5
        assert abs(out.y - box.y) < 0.5

    def test_grid_has_25_points(self):
        assert len(seed_grid(BBox(0, 0, 10, 10))) == 25

    def test_untrackable_returns_search_box_with_flag(self):
        flat_a = np.full((64, 64), 0.1)
        flat_b = np.full((64, 64), 0.9)
        box = BBox(20, 20, 16, 16)
        search = BBox(22, 20, 16, 16)
        out, diag = flow_reposition(box, search, flat_a, flat_b)
        assert diag.untrackable
        assert out == search


class TestRefineBox:
    def test_all_equal_scores_returns_input(self):
        box = BBox(10, 10, 20, 20)
        out = refine_box(lambda boxes: np.zeros(len(boxes)), box)
        assert out == box

    def test_planted_optimum_selected(self):
        box = BBox(10, 10, 20, 20)
        want = BBox(10 - 0.5, 10 - 0.5, 21, 21)  # the pure scale-1.05 cell

        def score(boxes):
            return np.array([-abs(b.w - want.w) - abs(b.cx - want.cx) - abs(b.cy - want.cy) for b in boxes])

        out = refine_box(score, box)
        assert out.w == pytest.approx(21.0)
        assert out.cx == pytest.approx(box.cx)

    def test_bounded_change(self):
        box = BBox(30, 30, 20, 24)
        rng = np.random.default_rng(0)
        out = refine_box(lambda boxes: rng.random(len(boxes)), box)
        assert abs(out.cx - box.cx) <= 2.0 and abs(out.cy - box.cy) <= 2.0
        assert 0.9 * box.w <= out.w <= 1.11 * box.w

    def test_idempotent_at_optimum(self):
        box = BBox(10, 10, 20, 20)

        def score(boxes):
            # peak exactly at the unperturbed cell
            return np.array([-(abs(b.cx - 20) + abs(b.cy - 20) + abs(b.w - 20) + abs(b.h - 20)) for b in boxes])

        once = refine_box(score, box)
        twice = refine_box(score, once)
        assert once == box and twice == box

    def test_grid_ordered_by_perturbation(self):
        cells = refine_candidates(BBox(0, 0, 10, 10))
        keys = [k for k, _ in cells]
        assert keys == sorted(keys)
        assert cells[0][1] == BBox(0, 0, 10, 10)


class TestDrmDecide:
    def test_branch_on_sign(self):
        box = BBox(0, 0, 10, 10)
        refined = BBox(1, 0, 10, 10)
        flowed = BBox(0, 1, 10, 10)
        out, branch = drm_decide(1.0, box, lambda b: refined, lambda b: flowed)
        assert (out, branch) == (refined, "refine")
        out, branch = drm_decide(-1.0, box, lambda b: refined, lambda b: flowed)
        assert (out, branch) == (flowed, "flow")
        out, branch = drm_decide(0.0, box, lambda b: refined, lambda b: flowed)
        assert (out, branch) == (box, "none")
