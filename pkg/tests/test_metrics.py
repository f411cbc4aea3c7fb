"""Metric suite: analytic cases plus pixel-distance oracles."""

import json

import numpy as np
import pytest

from polysnap.errors import ContractError
from polysnap.metrics import (
    EvalRecord,
    boundary_f,
    boundary_map,
    build_report,
    category_miou,
    format_report,
    map_50_95,
)


def rec(i, cat, iou, f=None):
    return EvalRecord(i, cat, iou, f or {})


def brute_force_f(pred, gt, tol):
    """Direct nearest-boundary-pixel distance counting, no morphology."""

    def boundary(mask):
        m = mask.astype(bool)
        out = np.zeros_like(m)
        h, w = m.shape
        for i in range(h):
            for j in range(w):
                if not m[i, j]:
                    continue
                for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < h and 0 <= nj < w and not m[ni, nj]:
                        out[i, j] = True
                        break
        return out

    pb, gb = boundary(pred), boundary(gt)
    pp = np.argwhere(pb)
    gp = np.argwhere(gb)
    if len(pp) == 0 and len(gp) == 0:
        return 1.0
    if len(pp) == 0 or len(gp) == 0:
        return 0.0
    lim = (tol + 0.5) ** 2

    def frac_within(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        return float((d2 <= lim).mean())

    p = frac_within(pp, gp)
    r = frac_within(gp, pp)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


class TestCategoryMiou:
    def test_unweighted_over_categories(self):
        records = [rec(0, "a", 1.0)] + [rec(i, "b", 0.0) for i in range(1, 100)]
        per_cat, miou = category_miou(records)
        assert per_cat == {"a": 1.0, "b": 0.0}
        assert miou == 0.5

    def test_uniform_value_passes_through(self):
        records = [rec(i, c, 0.7) for i, c in enumerate("abcab")]
        _, miou = category_miou(records)
        assert abs(miou - 0.7) < 1e-12

    def test_eight_category_row_average(self):
        vals = {
            "bicycle": 63.89,
            "bus": 80.61,
            "person": 72.12,
            "train": 70.25,
            "truck": 80.11,
            "motorcycle": 64.02,
            "car": 79.40,
            "rider": 68.19,
        }
        records = [rec(i, c, v / 100) for i, (c, v) in enumerate(vals.items())]
        _, miou = category_miou(records)
        assert abs(miou * 100 - 72.33) < 0.01

    def test_order_invariant(self):
        rng = np.random.default_rng(0)
        records = [rec(i, "abc"[i % 3], float(rng.uniform())) for i in range(30)]
        _, a = category_miou(records)
        shuffled = list(records)
        rng.shuffle(shuffled)
        _, b = category_miou(shuffled)
        assert a == b

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            category_miou([])


class TestMap5095:
    def test_perfect(self):
        assert map_50_95([rec(i, "a", 1.0) for i in range(3)]) == 1.0

    def test_all_070_gives_half(self):
        assert map_50_95([rec(i, "a", 0.70) for i in range(4)]) == 0.5

    def test_mixed_09_06(self):
        got = map_50_95([rec(0, "a", 0.9), rec(1, "b", 0.6)])
        assert abs(got - 0.6) < 1e-12

    def test_monotone_under_improvement(self):
        rng = np.random.default_rng(1)
        ious = rng.uniform(0, 1, size=20)
        base = map_50_95([rec(i, "a", float(v)) for i, v in enumerate(ious)])
        bumped = np.minimum(ious + rng.uniform(0, 0.2, size=20), 1.0)
        better = map_50_95([rec(i, "a", float(v)) for i, v in enumerate(bumped)])
        assert better >= base


def filled_square(size, top, left, side):
    m = np.zeros((size, size), bool)
    m[top : top + side, left : left + side] = True
    return m


class TestBoundaryF:
    def test_identical_masks(self):
        m = filled_square(32, 8, 8, 12)
        for tol in (1, 2, 5):
            assert boundary_f(m, m, tol) == 1.0

    def test_half_plane_shift_3px_tol_1_is_zero(self):
        gt = np.zeros((32, 32), bool)
        gt[:, 10:] = True
        pred = np.zeros((32, 32), bool)
        pred[:, 13:] = True
        assert boundary_f(pred, gt, 1) == 0.0

    def test_square_shift_1px_tol_1_is_one(self):
        gt = filled_square(32, 8, 8, 12)
        pred = np.roll(gt, 1, axis=1)
        assert boundary_f(pred, gt, 1) == 1.0

    def test_frame_is_not_boundary(self):
        # a mask running to the image edge has no boundary there
        full = np.ones((16, 16), bool)
        assert not boundary_map(full).any()
        half = np.zeros((16, 16), bool)
        half[:, 8:] = True
        b = boundary_map(half)
        assert (np.argwhere(b)[:, 1] == 8).all()
        assert b.sum() == 16

    def test_empty_rules(self):
        empty = np.zeros((16, 16), bool)
        blob = filled_square(16, 4, 4, 6)
        assert boundary_f(empty, empty, 1) == 1.0
        assert boundary_f(blob, empty, 1) == 0.0
        assert boundary_f(empty, blob, 1) == 0.0

    def test_matches_distance_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(8):
            a = filled_square(24, rng.integers(2, 8), rng.integers(2, 8), rng.integers(5, 12))
            b = filled_square(24, rng.integers(2, 8), rng.integers(2, 8), rng.integers(5, 12))
            # roughen one edge so boundaries are not pure rectangles
            a[rng.integers(2, 22), rng.integers(2, 22)] = True
            for tol in (1, 2):
                got = boundary_f(a, b, tol)
                want = brute_force_f(a, b, tol)
                assert abs(got - want) < 1e-12, f"trial {trial} tol {tol}"

    def test_symmetric_and_monotone_in_tolerance(self):
        rng = np.random.default_rng(3)
        a = filled_square(32, 5, 5, 14)
        b = np.roll(filled_square(32, 7, 9, 13), 0)
        assert boundary_f(a, b, 2) == boundary_f(b, a, 2)
        vals = [boundary_f(a, b, t) for t in (1, 2, 3, 4, 6)]
        assert all(x <= y + 1e-12 for x, y in zip(vals, vals[1:]))

    def test_contract_errors(self):
        a = np.zeros((8, 8), bool)
        with pytest.raises(ContractError):
            boundary_f(a, np.zeros((8, 9), bool), 1)
        with pytest.raises(ContractError):
            boundary_f(a, a, 0)


class TestReport:
    def test_build_and_format(self):
        records = [
            rec(0, "a", 0.9, {1: 0.5, 2: 0.8}),
            rec(1, "b", 0.7, {1: 0.7, 2: 0.9}),
        ]
        rep = build_report(records)
        assert rep["instances"] == 2
        assert abs(rep["miou"] - 0.8) < 1e-12
        assert abs(rep["boundary_f"]["1"] - 0.6) < 1e-12
        assert abs(rep["boundary_f"]["2"] - 0.85) < 1e-12
        text = format_report(rep)
        assert "mIoU" in text and "0.8000" in text
        json.loads(json.dumps(rep))  # serializable round trip

    def test_record_validation(self):
        with pytest.raises(ContractError):
            EvalRecord(0, "a", 1.5)
        with pytest.raises(ContractError):
            EvalRecord(0, "a", 0.5, {1: -0.1})
