import dataclasses
import json
import math

import mpmath as mp
import pytest
from hypothesis import given, strategies as st

from crashlab.errors import DomainError, LengthMismatch, NonPositiveExpected
from crashlab.hsm import (
    INT_A, INT_B, CorridorSpec, Intersection, cell_chi_square, load_corridor, predict_corridor,
    spf_intersection_4st, spf_segment,
)

# 40-digit evaluations of the closed forms, major AADT 8600
SEGMENT_8600_8_4 = 19.300596143712856
INTERSECTION_ORACLE = {
    15125: 4.905953783352765,
    1625: 0.98876909509990929,
    1900: 1.1062346381414399,
    95: 0.1287382840055513,
}


def _mp_intersection(major, minor):
    with mp.workdps(40):
        return float(mp.e ** (mp.mpf("-9.025") + mp.mpf("0.409") * mp.log(major) + mp.mpf("0.718") * mp.log(minor)))


class TestSpf:
    def test_segment(self):
        assert spf_segment(8600, 8.4) == pytest.approx(SEGMENT_8600_8_4, rel=1e-14)
        assert spf_segment(8600, 8.4) == pytest.approx(19.30, abs=0.01)

    @pytest.mark.parametrize("minor", sorted(INTERSECTION_ORACLE))
    def test_intersections_frozen(self, minor):
        assert spf_intersection_4st(8600, minor) == pytest.approx(INTERSECTION_ORACLE[minor], rel=1e-13)

    @given(st.floats(1, 1e5), st.floats(1, 1e5))
    def test_intersection_live_oracle(self, major, minor):
        assert spf_intersection_4st(major, minor) == pytest.approx(_mp_intersection(major, minor), rel=1e-12)

    def test_domain(self):
        for args in ((0, 8.4), (8600, 0), (-1, 1), (float("nan"), 1)):
            with pytest.raises(DomainError):
                spf_segment(*args)
        with pytest.raises(DomainError):
            spf_intersection_4st(8600, 0)

    @given(st.floats(1, 1e5), st.floats(0.01, 50))
    def test_segment_linear(self, aadt, length):
        assert spf_segment(aadt, 2 * length) == pytest.approx(2 * spf_segment(aadt, length), rel=1e-13)

    @given(st.floats(1, 1e5), st.floats(1, 1e5), st.floats(1.001, 10))
    def test_monotone(self, major, minor, k):
        assert spf_intersection_4st(major * k, minor) > spf_intersection_4st(major, minor)
        assert spf_intersection_4st(major, minor * k) > spf_intersection_4st(major, minor)
        assert spf_segment(major * k, 1.0) > spf_segment(major, 1.0)

    def test_unit_minor(self):
        assert spf_intersection_4st(8600, 1) == pytest.approx(math.exp(INT_A + INT_B * math.log(8600)), rel=1e-14)


class TestCorridor:
    def test_bundled_spec(self):
        spec = load_corridor()
        assert (spec.aadt_major, spec.segment_length, spec.study_years) == (8600, 8.4, 5)
        assert {x.name: x.aadt_minor for x in spec.intersections} == {
            "NC168": 15125, "Indiantown Rd": 1625, "Maple Rd": 1900, "Four Forks Rd": 95}

    def test_computed_total(self):
        pred = predict_corridor(load_corridor(), 163)
        expected = 5 * (SEGMENT_8600_8_4 + sum(INTERSECTION_ORACLE.values()))
        assert pred.computed_total == pytest.approx(expected, rel=1e-13)
        assert pred.computed_total == pytest.approx(132.15, abs=0.01)
        assert not pred.overridden

    def test_forced_expected(self):
        pred = predict_corridor(load_corridor(), 163, expected_override=245,
                                observed_by_year=[36, 29, 32, 34, 32])
        z, total, yearly = pred.tests
        assert z.statistic == pytest.approx(-5.24, abs=0.01) and z.p_value < 0.001
        assert total.statistic == pytest.approx((163 - 245) ** 2 / 245) and total.df == 1
        assert yearly.df == 5
        assert pred.overridden and "245" in pred.to_markdown()
        assert json.loads(json.dumps(pred.to_json_obj()))["expected_total"] == 245

    def test_equal_gives_zero(self):
        pred = predict_corridor(load_corridor(), 100, expected_override=100)
        assert pred.tests[0].statistic == 0.0

    @given(st.floats(0.1, 5), st.floats(0.1, 5))
    def test_linear_in_cf_and_cmf(self, cf, cmf):
        base = load_corridor()
        scaled = dataclasses.replace(base, calibration_factor=cf, cmf_product=cmf)
        a = predict_corridor(base, 10).computed_total
        assert predict_corridor(scaled, 10).computed_total == pytest.approx(a * cf * cmf, rel=1e-12)

    def test_negligible_intersection(self):
        base = load_corridor()
        more = dataclasses.replace(base, intersections=base.intersections + (Intersection("stub", 1.0),))
        delta = predict_corridor(more, 1).per_year - predict_corridor(base, 1).per_year
        assert delta == pytest.approx(math.exp(INT_A + INT_B * math.log(8600)), rel=1e-10)

    def test_errors(self):
        spec = load_corridor()
        with pytest.raises(DomainError):
            predict_corridor(spec, -1)
        with pytest.raises(LengthMismatch):
            predict_corridor(spec, 10, observed_by_year=[1, 2])
        with pytest.raises(NonPositiveExpected):
            cell_chi_square([1], [0])
        with pytest.raises(DomainError):
            CorridorSpec(0, 1, 1)
        with pytest.raises(DomainError):
            CorridorSpec(1, 1, 1, (Intersection("x", -5),))


class TestConfig:
    def test_toml_and_json_agree(self, tmp_path):
        spec = load_corridor()
        j = tmp_path / "c.json"
        j.write_text(json.dumps(spec.to_dict()))
        t = tmp_path / "c.toml"
        rows = "\n".join(f'[[intersections]]\nname = "{x.name}"\naadt_minor = {x.aadt_minor}\n'
                         for x in spec.intersections)
        t.write_text(f"aadt_major = 8600\nsegment_length = 8.4\nstudy_years = 5\n{rows}")
        assert load_corridor(j) == spec == load_corridor(t)

    def test_rejects_unknown_and_missing(self):
        with pytest.raises(DomainError, match="unknown"):
            CorridorSpec.from_dict({"aadt_major": 1, "segment_length": 1, "study_years": 1, "lanes": 2})
        with pytest.raises(DomainError, match="missing"):
            CorridorSpec.from_dict({"aadt_major": 1})


def test_cell_chi_square_df_counts_cells():
    r = cell_chi_square([10, 20, 30], [20, 20, 20])
    assert r.df == 3 and r.statistic == pytest.approx(10.0)
