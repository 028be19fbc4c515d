import datetime as dt

import numpy as np
import pytest

from clbart.errors import (
    CoverageError,
    DesignViolationError,
    MalformedStratumError,
    ParseError,
)
from clbart.strata import (
    BINARY,
    CONTINUOUS,
    ColumnSchema,
    Dataset,
    Event,
    Stratum,
    build_time_stratified_windows,
    ingest_dataset,
    referent_dates,
)


def write_csv(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


MINIMAL = """stratum_id,case,z,x_1,w_1
A,0,0.1,1.0,1
A,1,0.9,0.5,1
A,0,0.2,0.3,1
A,0,0.0,0.2,1
"""


def test_ingest_minimal_file(tmp_path):
    d = ingest_dataset(write_csv(tmp_path, MINIMAL))
    assert d.n_strata == 1
    assert d.strata[0].n_rows == 4
    assert d.strata[0].case_index == 1
    assert d.confounder_names == ("x_1",)
    assert d.moderator_names == ("w_1",)


def test_ingest_two_case_rows_is_malformed(tmp_path):
    text = MINIMAL.replace("A,0,0.2", "A,1,0.2")
    with pytest.raises(MalformedStratumError) as err:
        ingest_dataset(write_csv(tmp_path, text))
    assert err.value.stratum_id == "A"
    assert err.value.n_cases == 2


def test_ingest_zero_case_rows_is_malformed(tmp_path):
    text = MINIMAL.replace("A,1,0.9", "A,0,0.9")
    with pytest.raises(MalformedStratumError):
        ingest_dataset(write_csv(tmp_path, text))


def test_ingest_varying_moderator_is_design_violation(tmp_path):
    text = MINIMAL.replace("A,0,0.0,0.2,1", "A,0,0.0,0.2,0")
    with pytest.raises(DesignViolationError):
        ingest_dataset(write_csv(tmp_path, text))


def test_ingest_missing_value_reports_row(tmp_path):
    text = MINIMAL.replace("A,0,0.2,0.3,1", "A,0,,0.3,1")
    with pytest.raises(ParseError) as err:
        ingest_dataset(write_csv(tmp_path, text))
    assert err.value.row == 4


def test_ingest_bad_case_indicator(tmp_path):
    text = MINIMAL.replace("A,1,0.9", "A,2,0.9")
    with pytest.raises(ParseError):
        ingest_dataset(write_csv(tmp_path, text))


def test_ingest_missing_required_column(tmp_path):
    with pytest.raises(ParseError):
        ingest_dataset(write_csv(tmp_path, "id,case,z\nA,1,0.5\n"))


def test_ingest_kind_inference_and_override(tmp_path):
    text = """stratum_id,case,z,w_1,w_2
A,1,0.9,1,0.3
A,0,0.1,1,0.3
B,1,0.5,0,0.8
B,0,0.4,0,0.8
"""
    d = ingest_dataset(write_csv(tmp_path, text))
    assert d.moderator_kinds == (BINARY, CONTINUOUS)
    d2 = ingest_dataset(
        write_csv(tmp_path, text, "o.csv"),
        ColumnSchema(moderator_kinds={"w_1": CONTINUOUS}),
    )
    assert d2.moderator_kinds == (CONTINUOUS, CONTINUOUS)


def test_ingest_explicit_schema_roles(tmp_path):
    text = "sid,y,exposure,temp,comorbid\nS,1,1.0,20.0,1\nS,0,0.0,18.0,1\n"
    schema = ColumnSchema(
        stratum_id="sid", case="y", exposure="exposure",
        confounders=("temp",), moderators=("comorbid",),
    )
    d = ingest_dataset(write_csv(tmp_path, text), schema)
    assert d.confounder_names == ("temp",)
    assert d.strata[0].z[0] == 1.0


def test_constant_exposure_strata_retained_and_flagged(tmp_path):
    text = """stratum_id,case,z,w_1
A,1,0.5,1
A,0,0.5,1
B,1,0.7,0
B,0,0.1,0
"""
    d = ingest_dataset(write_csv(tmp_path, text))
    assert d.n_strata == 2
    assert d.constant_exposure_ids() == ("A",)


def test_stratum_invariants():
    with pytest.raises(ValueError):
        Stratum(id=0, case_index=0, z=[1.0], x=np.zeros((1, 0)), w=[])
    with pytest.raises(ValueError):
        Stratum(id=0, case_index=5, z=[1.0, 0.0], x=np.zeros((2, 0)), w=[])
    with pytest.raises(ValueError):
        Stratum(id=0, case_index=0, z=[1.0, 0.0], x=np.zeros((3, 1)), w=[])


def test_dataset_rejects_binary_kind_violation():
    s = Stratum(id=0, case_index=0, z=[1.0, 0.0], x=np.zeros((2, 0)), w=[0.4])
    with pytest.raises(ValueError):
        Dataset((s,), ("w_1",), (BINARY,), ())


def test_referent_dates_july_tuesday():
    got = referent_dates(dt.date(2005, 7, 12))
    assert got == [
        dt.date(2005, 7, 5),
        dt.date(2005, 7, 12),
        dt.date(2005, 7, 19),
        dt.date(2005, 7, 26),
    ]


def test_referent_dates_nonleap_february_has_three_referents():
    # every weekday occurs exactly 4 times in a 28-day month
    for day in range(1, 29):
        window = referent_dates(dt.date(2006, 2, day))
        assert len(window) == 4


def _streams(days):
    exposure = {d: float(i) for i, d in enumerate(days)}
    confounders = {d: [float(i) * 0.1] for i, d in enumerate(days)}
    return exposure, confounders


def _all_days(year, month):
    d = dt.date(year, month, 1)
    out = []
    while d.month == month:
        out.append(d)
        d += dt.timedelta(days=1)
    return out


def test_build_windows_rows_and_case_index():
    days = _all_days(2005, 7)
    exposure, confounders = _streams(days)
    ev = Event(id="e1", date=dt.date(2005, 7, 12), w=[1.0], exposure=exposure,
               confounders=confounders)
    d = build_time_stratified_windows([ev])
    s = d.strata[0]
    assert s.n_rows == 4
    assert s.case_index == 1
    assert s.z[1] == exposure[dt.date(2005, 7, 12)]
    np.testing.assert_allclose(s.x[:, 0], [0.4, 1.1, 1.8, 2.5])


def test_build_windows_sizes_always_4_or_5():
    rng = np.random.default_rng(0)
    days = _all_days(2005, 1) + _all_days(2005, 2) + _all_days(2005, 3)
    exposure, _ = _streams(days)
    events = [
        Event(id=i, date=days[int(rng.integers(len(days)))], w=[0.0],
              exposure=exposure)
        for i in range(60)
    ]
    d = build_time_stratified_windows(events)
    assert all(s.n_rows in (4, 5) for s in d.strata)


def test_build_windows_missing_date_is_coverage_error():
    days = _all_days(2005, 7)
    exposure, _ = _streams(days)
    del exposure[dt.date(2005, 7, 26)]
    ev = Event(id="e1", date=dt.date(2005, 7, 12), w=[], exposure=exposure)
    with pytest.raises(CoverageError):
        build_time_stratified_windows([ev])


def test_build_windows_reorder_invariant():
    rng = np.random.default_rng(3)
    days = _all_days(2005, 5) + _all_days(2005, 6)
    exposure, confounders = _streams(days)
    events = [
        Event(id=i, date=days[int(rng.integers(len(days)))], w=[float(i % 2)],
              exposure=exposure, confounders=confounders)
        for i in range(20)
    ]
    d1 = build_time_stratified_windows(events)
    d2 = build_time_stratified_windows(list(reversed(events)))

    def key(s):
        return (s.id, s.case_index, s.z.tobytes(), s.x.tobytes(), s.w.tobytes())

    assert sorted(map(key, d1.strata)) == sorted(map(key, d2.strata))


def test_random_valid_files_satisfy_invariants(tmp_path):
    rng = np.random.default_rng(7)
    for trial in range(20):
        n_strata = int(rng.integers(1, 6))
        lines = ["stratum_id,case,z,x_1,w_1"]
        for sid in range(n_strata):
            size = int(rng.integers(2, 6))
            case_row = int(rng.integers(size))
            w = float(rng.integers(0, 2))
            for r in range(size):
                lines.append(
                    f"s{sid},{int(r == case_row)},{rng.normal():.4f},"
                    f"{rng.normal():.4f},{w:g}"
                )
        d = ingest_dataset(
            write_csv(tmp_path, "\n".join(lines) + "\n", f"t{trial}.csv")
        )
        assert d.n_strata == n_strata
        for s in d.strata:
            assert s.n_rows >= 2
            assert 0 <= s.case_index < s.n_rows
            assert s.x.shape == (s.n_rows, 1)


def test_random_invalid_files_raise(tmp_path):
    # duplicated case row in a random position
    rng = np.random.default_rng(9)
    for trial in range(10):
        size = int(rng.integers(3, 6))
        lines = ["stratum_id,case,z,w_1"]
        for r in range(size):
            lines.append(f"s,{int(r <= 1)},{rng.normal():.4f},1")
        with pytest.raises(MalformedStratumError):
            ingest_dataset(write_csv(tmp_path, "\n".join(lines) + "\n", f"i{trial}.csv"))
