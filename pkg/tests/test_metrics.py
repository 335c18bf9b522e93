import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import assd_oracle, boundary_oracle, dice_oracle, random_mask_pair
from sgdr.metrics import (
    EvalReport,
    assd,
    assd_with_status,
    dice_coefficient,
    evaluate,
    extract_boundary,
    parse_table,
)

masks16 = arrays(np.bool_, (16, 16))


class TestDice:
    def test_identical(self):
        m = np.zeros((8, 8), bool)
        m[2:5, 2:6] = True
        assert dice_coefficient(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
        a[0, 0], b[5, 5] = True, True
        assert dice_coefficient(a, b) == 0.0

    def test_counted_example(self):
        a, b = np.zeros((4, 4), bool), np.zeros((4, 4), bool)
        a[0, :4] = True          # |A| = 4
        b[0, :2] = True          # |B| = 2, overlap 2
        assert dice_coefficient(a, b) == pytest.approx(4 / 6)
        assert round(dice_coefficient(a, b), 4) == 0.6667

    def test_both_empty(self):
        z = np.zeros((4, 4), bool)
        assert dice_coefficient(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice_coefficient(np.zeros((4, 4)), np.zeros((4, 5)))

    @given(masks16, masks16)
    def test_symmetric_and_matches_oracle(self, a, b):
        assert dice_coefficient(a, b) == dice_coefficient(b, a)
        assert dice_coefficient(a, b) == pytest.approx(dice_oracle(a, b), abs=1e-12)


class TestBoundary:
    def test_single_pixel(self):
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        assert extract_boundary(m) == {(2, 2)}

    def test_filled_square(self):
        m = np.zeros((7, 7), bool)
        m[2:5, 2:5] = True
        expected = {(r, c) for r in range(2, 5) for c in range(2, 5)} - {(3, 3)}
        assert extract_boundary(m) == expected and len(expected) == 8

    def test_empty(self):
        assert extract_boundary(np.zeros((4, 4), bool)) == set()

    def test_image_border_counts_as_outside(self):
        assert extract_boundary(np.ones((3, 3), bool)) == {(r, c) for r in range(3) for c in range(3)} - {(1, 1)}

    @given(masks16)
    def test_matches_oracle(self, m):
        assert extract_boundary(m) == set(boundary_oracle(m))


class TestASSD:
    def test_identical(self):
        m = np.zeros((8, 8), bool)
        m[2:6, 3:5] = True
        assert assd(m, m) == 0.0

    def _pair(self):
        a, b = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
        a[4, 1], b[4, 4] = True, True
        return a, b

    def test_three_columns_apart(self):
        assert assd(*self._pair(), (1.0, 1.0)) == 3.0

    def test_column_spacing_scales(self):
        assert assd(*self._pair(), (1.0, 2.0)) == 6.0

    def test_degenerate_one_empty(self):
        a = np.zeros((8, 8), bool)
        b = a.copy()
        b[3, 3] = True
        val, deg = assd_with_status(a, b, (1.0, 2.0))
        assert deg and val == pytest.approx(np.hypot(8, 16))
        assert assd_with_status(a, a) == (0.0, False)

    def test_translation_invariant(self):
        rng = np.random.default_rng(3)
        a, b = random_mask_pair(rng, 12)
        pa, pb = np.zeros((24, 24), bool), np.zeros((24, 24), bool)
        pa[4:16, 5:17], pb[4:16, 5:17] = a, b
        qa, qb = np.roll(pa, (3, 2), (0, 1)), np.roll(pb, (3, 2), (0, 1))
        assert assd(pa, pb) == pytest.approx(assd(qa, qb), abs=1e-12)

    def test_isotropic_scaling_linear(self):
        rng = np.random.default_rng(4)
        a, b = random_mask_pair(rng)
        assert assd(a, b, (2.5, 2.5)) == pytest.approx(2.5 * assd(a, b), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(masks16, masks16, st.sampled_from([(1.0, 1.0), (1.0, 2.0), (0.7, 1.3)]))
    def test_symmetric_and_matches_oracle(self, a, b, spacing):
        assert assd(a, b, spacing) == pytest.approx(assd(b, a, spacing), abs=1e-9)
        assert assd(a, b, spacing) == pytest.approx(assd_oracle(a, b, spacing), abs=1e-6)


class TestEvaluate:
    def test_perfect(self):
        gt = np.zeros((16, 16), np.uint8)
        gt[2:6, 2:6], gt[8:12, 8:12], gt[12:14, 2:5] = 1, 2, 3
        rep = evaluate([gt], [gt])
        assert rep.dice == {"MYO": 100.0, "LV": 100.0, "RV": 100.0}
        assert rep.assd == {"MYO": 0.0, "LV": 0.0, "RV": 0.0}
        assert rep.mean_dice == 100.0 and rep.num_samples == 1

    def test_macro_average(self):
        gt = np.zeros((16, 16), np.uint8)
        gt[2:6, 2:6], gt[8:12, 8:12], gt[12:14, 2:5] = 1, 2, 3
        pred = gt.copy()
        pred[pred == 3] = 0
        rep = evaluate([pred, gt], [gt, gt])
        assert rep.dice["RV"] == pytest.approx(50.0)
        assert rep.mean_dice == pytest.approx((100 + 100 + 50) / 3)
        assert rep.num_degenerate == 1

    def test_table_columns(self):
        gt = np.ones((8, 8), np.uint8)
        text = evaluate([gt], [gt]).to_table()
        header = [ln for ln in text.splitlines() if not ln.startswith("#")][0]
        assert header.split()[1:] == ["MYO", "LV", "RV", "Average"]
        assert " ".join(header.split()[1:]) == "MYO LV RV Average"
        parsed = parse_table(text)
        assert parsed["Dice(%)"]["MYO"] == 100.0

    def test_json_roundtrip(self):
        rng = np.random.default_rng(0)
        preds = [rng.integers(0, 4, (16, 16)) for _ in range(3)]
        gts = [rng.integers(0, 4, (16, 16)) for _ in range(3)]
        rep = evaluate(preds, gts, (1.0, 1.5))
        assert EvalReport.from_json(rep.to_json()) == rep

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate([], [])

    def test_oracle_agreement_random(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            pred = rng.integers(0, 4, (16, 16))
            gt = rng.integers(0, 4, (16, 16))
            rep = evaluate([pred], [gt])
            for cls, name in ((1, "MYO"), (2, "LV"), (3, "RV")):
                assert rep.dice[name] == pytest.approx(100 * dice_oracle(pred == cls, gt == cls), abs=1e-6)
                assert rep.assd[name] == pytest.approx(assd_oracle(pred == cls, gt == cls), abs=1e-6)
