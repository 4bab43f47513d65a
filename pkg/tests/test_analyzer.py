import csv
import io

import numpy as np
import pytest

from robustlab.analyzer import analyze, cost_table, count_macs, count_params, rows_to_csv, rows_to_text, stage_shapes
from robustlab.arch import PRESET_GROUPS, build, preset_spec

# published GFLOPs and parameters (millions) for the full-size presets, as printed
TABLE7 = {
    "convnext-t": (4.47, 28.59), "convnext-t+convstem": (4.60, 28.63),
    "isotropic-convnext-s": (4.29, 22.31), "isotropic-convnext-s+convstem": (4.67, 23.04),
    "vit-s": (4.61, 22.05), "vit-s+convstem": (4.99, 22.78),
    "vit-m": (8.01, 38.85), "vit-m+convstem": (8.38, 39.5),
    "convnext-s": (8.70, 50.10), "convnext-s+convstem": (8.79, 50.33),
    "vit-b": (17.58, 86.57), "vit-b+convstem": (17.93, 87.14),
    "convnext-b": (15.38, 88.59), "convnext-b+convstem": (15.97, 88.75),
}


def test_head_params():
    spec = preset_spec("vit-s")
    head = [r for r in analyze(spec).rows if r.name == "head"][0]
    assert head.params == 384 * 1000 + 1000


def test_conv_macs_formula():
    spec = preset_spec("vit-s+convstem")
    first = analyze(spec).rows[0]
    assert first.name == "stem.0.conv"
    assert first.out_shape == (48, 112, 112)
    assert first.macs == 3 * 3 * 3 * 48 * 112 * 112 == 16_257_024


# rows whose printed parameter count no standard layout reproduces; see the decisions ledger
PARAM_GAPS = {"convnext-s": 50.22, "convnext-s+convstem": 50.26, "vit-b+convstem": 87.15}


def printed_round(value, printed):
    decimals = len(str(printed).split(".")[1]) if "." in str(printed) else 0
    return round(value, decimals)


@pytest.mark.parametrize("name", [n if n not in PARAM_GAPS else pytest.param(
    n, marks=pytest.mark.xfail(strict=True, reason="printed count not reproducible")) for n in TABLE7])
def test_table7_params(name):
    got = count_params(preset_spec(name)) / 1e6
    assert printed_round(got, TABLE7[name][1]) == TABLE7[name][1]


@pytest.mark.parametrize("name", list(PARAM_GAPS))
def test_table7_param_gaps_are_small(name):
    got = count_params(preset_spec(name)) / 1e6
    assert round(got, 2) == PARAM_GAPS[name]
    assert abs(got - TABLE7[name][1]) / TABLE7[name][1] < 0.003


@pytest.mark.parametrize("name", list(TABLE7))
def test_table7_macs_within_2pct(name):
    g = count_macs(preset_spec(name), 224) / 1e9
    assert abs(g - TABLE7[name][0]) <= 0.02 * TABLE7[name][0]


def test_totals_equal_row_sums():
    rep = analyze(preset_spec("convnext-t"))
    assert rep.params == sum(r.params for r in rep.rows)
    assert rep.macs == sum(r.macs for r in rep.rows)


def test_params_independent_of_resolution():
    spec = preset_spec("convnext-t")
    assert analyze(spec, 160).params == analyze(spec, 288).params


@pytest.mark.parametrize("name", ["micro-convnext", "micro-convnext+convstem", "micro-isotropic-convnext"])
def test_doubling_resolution_quadruples_conv_macs(name):
    spec = preset_spec(name)
    a, b = analyze(spec, 32), analyze(spec, 64)
    spatial = [(ra.macs, rb.macs) for ra, rb in zip(a.rows, b.rows) if ra.name != "head"]
    assert all(mb == 4 * ma for ma, mb in spatial)


def test_incompatible_resolution():
    with pytest.raises(ValueError, match="total stride"):
        count_macs(preset_spec("convnext-t"), 100)


@pytest.mark.parametrize("name", PRESET_GROUPS["micro"])
def test_micro_counts_match_build(name):
    spec = preset_spec(name)
    assert build(spec).num_parameters() == count_params(spec)


@pytest.mark.parametrize("name", PRESET_GROUPS["micro"])
def test_macs_monotone_in_resolution(name):
    spec = preset_spec(name)
    macs = [count_macs(spec, r) for r in (32, 64, 96)]
    assert macs == sorted(macs) and len(set(macs)) == 3


class TestCostTable:
    def test_deltas(self):
        specs = [preset_spec(n) for n in ("convnext-t", "convnext-t+convstem", "vit-s", "vit-s+convstem")]
        _, rows = cost_table(specs)
        by = {r.name: r for r in rows}
        assert round(by["convnext-t+convstem"].params_delta_pct, 1) == 0.1
        assert by["convnext-t"].params_delta_pct is None
        # 8.2% with exact counts; the printed table rounds both totals first
        assert abs(by["vit-s+convstem"].macs_delta_pct - 8.1) <= 0.2

    def test_empty(self):
        reports, rows = cost_table([])
        assert reports == [] and rows == []
        assert rows_to_csv(rows).strip() == "name,params,macs,params_m,gmacs,params_delta_pct,macs_delta_pct"

    def test_csv_and_text(self):
        _, rows = cost_table([preset_spec(n) for n in PRESET_GROUPS["table7"]])
        parsed = list(csv.DictReader(io.StringIO(rows_to_csv(rows))))
        assert len(parsed) == 14
        assert parsed[0]["params_m"] == "28.59"
        text = rows_to_text(rows)
        assert text.splitlines()[2].split()[0] == "convnext-t"


def test_stage_shapes_convnext_t():
    shapes = stage_shapes(preset_spec("convnext-t"), 224)
    assert shapes["stem"] == (96, 56, 56)
    assert shapes["stage3"] == (768, 7, 7)
