import re

import pytest
from hypothesis import given, strategies as st

from radlab import report as R
from radlab.report import MetricRecord

TABLE, NAMES = R.load_published_strategies()


def rank(preset, metric, records=TABLE):
    return next(r for r in R.compare_strategies(records) if r.preset == preset and r.metric == metric)


def rec(strategy="+midtrain", k="5", seed=0, v=0.5, preset="toy"):
    return MetricRecord(strategy, preset, k, seed, v, v, v, v)


def test_fixture_shape():
    assert len(TABLE) == 9
    assert {r.preset for r in TABLE} == {"0.2B", "0.7B", "3B"}
    assert NAMES[TABLE[2]] == "GatorTronT5-base-Radio"


def test_base_rouge_order():
    r = rank("0.2B", "rouge_l")
    assert r.order == (("+midtrain", 0.5281), ("+clinical-pretrain", 0.5018), ("general-only", 0.4874))
    assert not r.tie


def test_xl_entity_non_monotone_cell():
    r = rank("3B", "entity_f1")
    assert r.order == (("+midtrain", 0.5655), ("general-only", 0.5495), ("+clinical-pretrain", 0.5428))


@pytest.mark.parametrize("preset", ["0.2B", "0.7B", "3B"])
@pytest.mark.parametrize("metric", ["rouge_l", "meteor", "embed_score"])
def test_midtrain_leads_lexical_and_semantic(preset, metric):
    assert rank(preset, metric).order[0][0] == "+midtrain"


def test_table_bolds_best_per_size():
    text = R.render_table(TABLE, NAMES)
    for value in ("0.5281", "0.5709", "0.6362"):
        assert f"**{value}**" in text
    radio = [line for line in text.splitlines() if "-Radio" in line]
    assert len(radio) == 3 and all(line.count("**") == 8 for line in radio[:2])
    xl = next(line for line in text.splitlines() if line.startswith("T5-XL "))
    assert "**0.5495**" not in xl  # best entity score at 3B belongs to the mid-trained row


def test_table_row_order_by_size_then_depth():
    rows = [line.split()[0] for line in R.render_table(TABLE, NAMES).splitlines()[2:]]
    assert rows == ["T5-base", "GatorTronT5-base", "GatorTronT5-base-Radio", "T5-large", "GatorTronT5-large",
                    "GatorTronT5-large-Radio", "T5-XL", "GatorTronT5-XL", "GatorTronT5-XL-Radio"]


def test_single_record_table():
    lines = R.render_table([rec()]).splitlines()
    assert len(lines) == 3


def test_empty_records_rejected(tmp_path):
    with pytest.raises(R.ReportError):
        R.render([], "table", tmp_path)
    with pytest.raises(R.ReportError):
        R.render_table([])


def test_unknown_mode(tmp_path):
    with pytest.raises(R.ReportError):
        R.render([rec()], "pie", tmp_path)


def test_tie_flag_and_depth_order():
    r = rank("toy", "rouge_l", [rec("general-only", v=0.4), rec("+midtrain", v=0.4)])
    assert r.tie and r.order[0][0] == "+midtrain"


def test_compare_needs_two_strategies():
    with pytest.raises(R.ReportError):
        R.compare_strategies([rec(seed=0), rec(seed=1)])


def test_fixture_round_trip(tmp_path):
    R.render(TABLE, "table", tmp_path, names=NAMES)
    back = R.load_records(tmp_path / "table.csv")
    assert sorted(back, key=R.sort_key) == sorted(TABLE, key=R.sort_key)
    text = (tmp_path / "table.txt").read_text()
    for r in TABLE:
        assert f"{r.rouge_l:.4f}" in text and f"{r.entity_f1:.4f}" in text


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=6))
def test_csv_round_trip(values):
    records = [rec(k=str(5 * (i + 1)), v=round(v, 6)) for i, v in enumerate(values)]
    assert R.records_from_csv(R.records_to_csv(records)) == records


def test_csv_header():
    assert R.records_to_csv([rec()]).splitlines()[0] == "strategy,preset,k,seed,rouge_l,meteor,embed_score,entity_f1"


def test_record_validation():
    with pytest.raises(R.ReportError):
        rec(v=1.5)
    with pytest.raises(R.ReportError):
        rec(k="five")


def test_curves_monotone_polylines(tmp_path):
    records = [rec(s, str(k), seed, v=min(1.0, base + 0.1 * i + 0.01 * seed))
               for s, base in (("general-only", 0.1), ("+midtrain", 0.3))
               for i, k in enumerate((5, 20, 50, 200))
               for seed in range(3)]
    paths = R.render(records, "curves", tmp_path)
    assert [p.name for p in paths] == [f"curve_{m}.svg" for m in R.METRICS]
    svg = paths[0].read_text()
    lines = R.parse_polylines(svg)
    assert set(lines) == {"general-only (toy)", "+midtrain (toy)"}
    for pts in lines.values():
        xs, ys = zip(*pts)
        assert list(xs) == sorted(xs)
        assert list(ys) == sorted(ys, reverse=True)  # SVG y grows downward
    assert svg.count('class="band"') == 2


def test_curves_log_axis():
    records = [rec(k=str(k), v=0.5) for k in (1, 10, 100)]
    xs = [p[0] for p in R.parse_polylines(R.render_curves(records, "rouge_l"))["+midtrain (toy)"]]
    assert xs[1] - xs[0] == pytest.approx(xs[2] - xs[1], abs=0.02)


def test_overlay_points():
    overlay = [o for o in R.load_published_fewshot() if o["kind"] == "point"]
    assert [(o["k"], o["rouge_l"]) for o in overlay] == [(5, 0.0992), (5, 0.4716)]
    svg = R.render_curves([rec(k="5"), rec(k="50")], "rouge_l", overlay)
    assert len(re.findall(r'class="published"', svg)) == 2


def test_aggregate_seed_stats():
    cell = R.aggregate([rec(seed=0, v=0.2), rec(seed=1, v=0.4)])[0]
    assert cell.n == 2 and cell.mean["rouge_l"] == pytest.approx(0.3)
    assert cell.low["rouge_l"] == 0.2 and cell.high["rouge_l"] == 0.4


def test_size_key():
    assert R.size_key("0.2B") < R.size_key("770m") < R.size_key("3B")
