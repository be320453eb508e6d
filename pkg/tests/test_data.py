"""Record schema, CSV loading rules, and the 3x3x3 typology grid."""

import csv

import numpy as np
import pytest

from causalflow.data import (
    COVARIATES,
    DEFAULT_DIVERSITY_ANCHORS,
    DEFAULT_INCOME_ANCHORS,
    DEFAULT_POPULATION_ANCHORS,
    CommunityRecord,
    TypologySpec,
    build_typologies,
    load_records,
    log_column_indices,
    records_to_arrays,
    split_arms,
    typologies_to_csv,
    write_records,
)
from causalflow.errors import ConfigError

HEADER = "zip,treated,claims_per_policy,precipitation_mm,flood_risk,median_income,population,renter_frac,edu_frac,diversity_frac"


def _row(zip="10001", treated="1", claims="850.0", precip="900", flood="0.2",
         income="55000", pop="12000", renter="0.4", edu="0.3", div="0.2"):
    return ",".join([zip, treated, claims, precip, flood, income, pop, renter, edu, div])


def _record(zip="10001", treated=True, claims=850.0, income=55_000.0,
            population=12_000.0, diversity=0.2, outreach=False):
    return CommunityRecord(
        zip=zip, treated=treated, claims_per_policy=claims,
        precipitation_mm=900.0, flood_risk=0.2, median_income=income,
        population=population, renter_frac=0.4, edu_frac=0.3,
        diversity_frac=diversity, outreach_only=outreach,
    )


class TestLoadRecords:
    def test_accepts_clean_rows(self, tmp_path):
        p = tmp_path / "in.csv"
        p.write_text(HEADER + "\n" + _row() + "\n" + _row(zip="10002", treated="0") + "\n")
        res = load_records(p)
        assert len(res.records) == 2
        assert res.rejects == []
        assert res.records[0].treated and not res.records[1].treated
        assert res.records[0].outreach_only is False

    def test_rejects_carry_line_field_reason(self, tmp_path):
        p = tmp_path / "in.csv"
        rows = [
            _row(),                       # line 2, ok
            _row(flood="1.4"),            # line 3, flood_risk above 1
            _row(income="-5"),            # line 4, income must be positive
            _row(claims="oops"),          # line 5, not a number
            _row(zip=""),                 # line 6, empty id
            _row(treated="maybe"),        # line 7, bad boolean
            _row(precip=""),              # line 8, missing value
        ]
        p.write_text(HEADER + "\n" + "\n".join(rows) + "\n")
        res = load_records(p)
        assert len(res.records) == 1
        got = {(line, fieldname) for line, fieldname, _ in res.rejects}
        assert got == {
            (3, "flood_risk"), (4, "median_income"), (5, "claims_per_policy"),
            (6, "zip"), (7, "treated"), (8, "precipitation_mm"),
        }
        reasons = dict((line, reason) for line, _, reason in res.rejects)
        assert "above" in reasons[3]
        assert "positive" in reasons[4]
        assert "not a number" in reasons[5]

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "in.csv"
        p.write_text(HEADER + "\n" + _row(claims="nan") + "\n")
        res = load_records(p)
        assert res.records == []
        assert res.rejects[0][2] == "non-finite value"

    def test_missing_header_column_aborts(self, tmp_path):
        p = tmp_path / "in.csv"
        p.write_text(HEADER.replace(",flood_risk", "") + "\n")
        with pytest.raises(ConfigError, match="flood_risk"):
            load_records(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_records(tmp_path / "nope.csv")

    def test_outreach_flag_parsed(self, tmp_path):
        p = tmp_path / "in.csv"
        p.write_text(HEADER + ",outreach_only\n" + _row() + ",1\n" + _row(zip="10002") + ",0\n")
        res = load_records(p)
        assert [r.outreach_only for r in res.records] == [True, False]

    def test_write_then_load_round_trip(self, tmp_path):
        records = [
            _record(),
            _record(zip="10002", treated=False, claims=1234.5678901234567, outreach=True),
        ]
        p = tmp_path / "out.csv"
        write_records(p, records)
        res = load_records(p)
        assert res.rejects == []
        assert res.records == records


class TestArrays:
    def test_records_to_arrays_order(self):
        r = _record()
        x, y = records_to_arrays([r])
        assert x.shape == (1, 7)
        np.testing.assert_array_equal(x[0], r.covariates())
        assert x[0, COVARIATES.index("median_income")] == 55_000.0
        assert y[0] == 850.0

    def test_empty(self):
        x, y = records_to_arrays([])
        assert x.shape == (0, 7) and y.shape == (0,)

    def test_split_arms(self):
        rs = [_record(treated=True), _record(zip="2", treated=False), _record(zip="3", treated=True)]
        tr, co = split_arms(rs)
        assert [r.zip for r in tr] == ["10001", "3"]
        assert [r.zip for r in co] == ["2"]

    def test_log_column_indices(self):
        idx = log_column_indices()
        assert idx == (COVARIATES.index("median_income"), COVARIATES.index("population"))


class TestTypologies:
    def test_default_anchors(self):
        assert DEFAULT_INCOME_ANCHORS == (40_000.0, 60_000.0, 90_000.0)
        assert DEFAULT_POPULATION_ANCHORS == (2_500.0, 12_000.0, 30_000.0)
        assert DEFAULT_DIVERSITY_ANCHORS == (0.05, 0.15, 0.40)

    def test_from_percentiles(self):
        rng = np.random.default_rng(0)
        records = [
            _record(zip=str(i), income=float(inc), population=float(pop), diversity=float(div))
            for i, (inc, pop, div) in enumerate(
                zip(
                    rng.uniform(30_000, 120_000, 200),
                    rng.uniform(1_000, 50_000, 200),
                    rng.uniform(0.0, 0.8, 200),
                )
            )
        ]
        spec = TypologySpec.from_percentiles(records)
        x, _ = records_to_arrays(records)
        inc = x[:, COVARIATES.index("median_income")]
        assert spec.income_anchors == tuple(float(np.percentile(inc, p)) for p in (16, 50, 84))

    def test_from_percentiles_empty(self):
        with pytest.raises(ConfigError, match="zero records"):
            TypologySpec.from_percentiles([])

    def test_anchor_validation(self):
        with pytest.raises(ConfigError, match="ascending"):
            TypologySpec(income_anchors=(90_000.0, 60_000.0, 40_000.0))
        with pytest.raises(ConfigError, match="positive"):
            TypologySpec(diversity_abs_band=0.0)

    def test_grid_order_and_count(self):
        cells = build_typologies([])
        assert len(cells) == 27
        labels = [t.label for t in cells]
        # income outermost, then population, then diversity, low->mid->high
        assert labels[0] == "income=low|population=low|diversity=low"
        assert labels[1] == "income=low|population=low|diversity=mid"
        assert labels[3] == "income=low|population=mid|diversity=low"
        assert labels[9] == "income=mid|population=low|diversity=low"
        assert labels[-1] == "income=high|population=high|diversity=high"
        assert all(not t.supported and t.matched_count == 0 for t in cells)

    def test_fiducial_matches_brute_force_median(self):
        rng = np.random.default_rng(1)
        records = []
        for i in range(400):
            records.append(
                _record(
                    zip=str(i),
                    income=float(rng.uniform(30_000, 120_000)),
                    population=float(rng.uniform(1_500, 40_000)),
                    diversity=float(rng.uniform(0.0, 0.5)),
                )
            )
        spec = TypologySpec()
        cells = build_typologies(records, spec)
        x, _ = records_to_arrays(records)
        ii = COVARIATES.index("median_income")
        pi = COVARIATES.index("population")
        di = COVARIATES.index("diversity_frac")
        anchors = {
            "low": 0, "mid": 1, "high": 2
        }
        checked = 0
        for t in cells:
            a_inc = spec.income_anchors[anchors[t.income_level]]
            a_pop = spec.population_anchors[anchors[t.population_level]]
            a_div = spec.diversity_anchors[anchors[t.diversity_level]]
            m = (
                (np.abs(x[:, ii] - a_inc) <= spec.income_rel_band * a_inc)
                & (np.abs(x[:, pi] - a_pop) <= spec.population_rel_band * a_pop)
                & (np.abs(x[:, di] - a_div) <= spec.diversity_abs_band)
            )
            assert t.matched_count == int(m.sum())
            if t.matched_count:
                np.testing.assert_array_equal(t.fiducial, np.median(x[m], axis=0))
                checked += 1
            else:
                assert t.fiducial is None
        assert checked >= 5  # the draw above populates plenty of cells

    def test_csv_writer(self, tmp_path):
        records = [_record(zip=str(i), income=60_000.0, population=12_000.0, diversity=0.15)
                   for i in range(4)]
        cells = build_typologies(records)
        path = tmp_path / "typ.csv"
        typologies_to_csv(cells, path)
        rows = list(csv.reader(path.open()))
        assert len(rows) == 28
        assert rows[0][:4] == ["label", "income_level", "population_level", "diversity_level"]
        supported = [r for r in rows[1:] if r[8] == "1"]
        assert len(supported) == 1
        assert supported[0][7] == "4"
        blank = [r for r in rows[1:] if r[8] == "0"]
        assert all(r[9] == "" for r in blank)
