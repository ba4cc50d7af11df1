import json

import numpy as np
import pytest

from nlsrace.fitting import (C60, NORMAL, TRAFFIC, FittedParams, InsufficientDataError, ParamFitter, TimingDataset,
                             TimingParseError, TimingRecord, classify_c60, fit_all, generate_synthetic, label_all,
                             parse_timing_csv)

HEADER = "race_id,car_id,class,grid_slot,lap,sector,sector_time_s\n"


def write(tmp_path, body, name="t.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


def test_parse_well_formed_row(tmp_path):
    ds = parse_timing_csv(write(tmp_path, "R1,car07,SP9,5,12,4,131.2\n"))
    assert len(ds) == 1
    rec = ds.records[0]
    assert rec == TimingRecord("R1", "car07", "SP9", 5, 12, 4, 131.2)


def test_parse_duplicate_rejected(tmp_path):
    with pytest.raises(TimingParseError) as exc:
        parse_timing_csv(write(tmp_path, "R1,car07,SP9,5,12,4,131.2\nR1,car07,SP9,5,12,4,130.0\n"))
    assert "line 3" in str(exc.value) or ":3" in str(exc.value)


def test_parse_class_filter(tmp_path):
    body = "R1,a,SP9,1,1,1,100\nR1,b,SP8,2,1,1,101\nR1,c,SP9,3,1,1,102\n"
    ds = parse_timing_csv(write(tmp_path, body))
    assert len(ds) == 2 and ds.skipped_class == 1
    assert len(parse_timing_csv(write(tmp_path, body), class_filter=None)) == 3


@pytest.mark.parametrize("row,column", [
    ("R1,a,SP9,x,1,1,100", "grid_slot"),
    ("R1,a,SP9,1,1,1,abc", "sector_time_s"),
    ("R1,a,SP9,1,1,1,-3", "sector_time_s"),
    ("R1,,SP9,1,1,1,100", "car_id"),
])
def test_parse_errors_name_line_and_column(tmp_path, row, column):
    with pytest.raises(TimingParseError) as exc:
        parse_timing_csv(write(tmp_path, "R1,z,SP9,1,1,1,100\n" + row + "\n"))
    msg = str(exc.value)
    assert "3" in msg and column in msg


def test_parse_bad_header_and_missing(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(TimingParseError):
        parse_timing_csv(path)
    with pytest.raises(FileNotFoundError):
        parse_timing_csv(tmp_path / "absent.csv")


def dataset(times, sector=1):
    recs = [TimingRecord("R1", f"c{k}", "SP9", k + 1, 1, sector, t) for k, t in enumerate(times)]
    return TimingDataset(recs)


def test_classify_examples():
    times = [130.0] * 20 + [288.0] * 3 + [130.0 * 1.05] * 2
    labels = classify_c60(dataset(times), 1)
    assert list(labels[-5:-2]) == [C60] * 3
    assert list(labels[-2:]) == [TRAFFIC] * 2
    assert set(labels[:20]) == {NORMAL}
    assert set(classify_c60(dataset([100.0] * 12), 1)) == {NORMAL}


def test_classify_needs_data():
    with pytest.raises(InsufficientDataError) as exc:
        classify_c60(dataset([100.0] * 3), 1)
    assert "sector 1" in str(exc.value)


def test_labels_partition(default_cfg):
    ds = generate_synthetic(FittedParams.from_config(default_cfg), 1, seed=2)
    labels = label_all(ds)
    assert len(labels) == len(ds)
    assert set(labels) <= {NORMAL, TRAFFIC, C60}


def test_synthetic_cardinality_and_determinism(det_cfg):
    params = FittedParams.from_config(det_cfg)
    ds = generate_synthetic(params, 1, seed=5, config=det_cfg)
    assert len(ds) == 16 * 25 * 5
    again = generate_synthetic(params, 1, seed=5, config=det_cfg)
    assert ds.to_csv() == again.to_csv()


def test_synthetic_csv_round_trip(tmp_path, default_cfg):
    ds = generate_synthetic(FittedParams.from_config(default_cfg), 1, seed=9)
    path = tmp_path / "syn.csv"
    ds.to_csv(path)
    assert parse_timing_csv(path).to_csv() == ds.to_csv()


def test_zero_c60_gives_zero_probability(default_cfg):
    cfg = default_cfg.replace(c60=default_cfg.c60.__class__((0.0,) * 5))
    ds = generate_synthetic(FittedParams.from_config(cfg), 3, seed=1, config=cfg)
    fitted = fit_all(ds, cfg)
    assert fitted.c60_prob == (0.0,) * 5


def test_fitted_params_json_round_trip(default_cfg):
    params = FittedParams.from_config(default_cfg)
    back = FittedParams.from_json(params.to_json())
    assert back == params
    assert back.apply(default_cfg) == default_cfg
    with pytest.raises(ValueError):
        FittedParams.from_dict({"start": []})


def test_param_fitter_estimator(default_cfg):
    ds = generate_synthetic(FittedParams.from_config(default_cfg), 4, seed=3)
    fitter = ParamFitter(config=default_cfg).fit(ds)
    assert len(fitter.params_.start) == 16
    assert fitter.predict(ds).shape == (len(ds),)
    report = fitter.report()
    assert "samples:" in report and "tire_log_coeff" in report
    assert abs(fitter.params_.tire_log_coeff - 0.8) < 0.3
    with pytest.raises(ValueError):
        ParamFitter(overtake_gate="median").fit(ds)
    with pytest.raises(TypeError):
        ParamFitter().fit([1, 2])


def test_small_sample_falls_back(default_cfg):
    ds = generate_synthetic(FittedParams.from_config(default_cfg), 1, seed=8)
    fitted = fit_all(ds, default_cfg)
    assert fitted.fallbacks
    assert json.loads(fitted.to_json())["fallbacks"] == fitted.fallbacks
