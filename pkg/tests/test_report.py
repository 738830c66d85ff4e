import pytest

from glus.report import OVERFIT_FLAG, CurveError, emit_curve, format_table, make_curve, read_curve, read_table, write_table


def test_curve_examples(tmp_path):
    path = emit_curve([(10, 0.3), (20, 0.5), (30, 0.4)], tmp_path / "c.csv")
    assert read_curve(path).points == ((10, 0.3), (20, 0.5), (30, 0.4))
    assert path.with_suffix(".png").is_file()
    with pytest.raises(CurveError, match="duplicate"):
        make_curve([(10, 0.1), (10, 0.2)])
    with pytest.raises(CurveError, match="order"):
        make_curve([(20, 0.1), (10, 0.2)])
    with pytest.raises(CurveError):
        make_curve([(10, 0.1)])


def test_overfitting_flag(tmp_path):
    falling = emit_curve([(1, 0.2), (2, 0.6), (3, 0.5), (4, 0.4)], tmp_path / "f.csv")
    assert OVERFIT_FLAG in falling.read_text()
    assert read_curve(falling).overfitting_suspect
    rising = emit_curve([(1, 0.2), (2, 0.3), (3, 0.4), (4, 0.5), (5, 0.6)], tmp_path / "r.csv")
    assert OVERFIT_FLAG not in rising.read_text()


def test_table_three_decimals(tmp_path):
    rows = [{"row": "+ GLU", "J": 0.51234, "F": 0.6, "J&F": 0.55617}]
    text = format_table(rows, ["row", "J", "F", "J&F"])
    assert text.splitlines()[1] == "+ GLU\t0.512\t0.600\t0.556"
    write_table(rows, ["row", "J", "F", "J&F"], tmp_path / "t.tsv")
    assert read_table(tmp_path / "t.tsv")[0]["J"] == 0.512
