import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfcl.metrics import (
    AccuracyMatrix,
    IncompatibleBundlesError,
    cumulative_accuracy,
    forgetting,
    mean_std,
    render_report,
)


def naive_forgetting(rows, t):
    drops = []
    for j in range(t - 1):
        best = max(rows[l][j] for l in range(j, t - 1))
        drops.append(best - rows[t - 1][j])
    return sum(drops) / len(drops)


def test_forgetting_worked_example():
    m = AccuracyMatrix.from_percent([[90.0], [70.0, 85.0]])
    assert forgetting(m, 2) == pytest.approx(20.0)


def test_forgetting_uses_best_intermediate():
    m = AccuracyMatrix.from_percent([[80.0], [90.0, 70.0], [60.0, 65.0, 50.0]])
    assert forgetting(m, 3) == pytest.approx(((90 - 60) + (70 - 65)) / 2)


def test_forgetting_undefined_for_first_task():
    assert forgetting(AccuracyMatrix.from_percent([[50.0]]), 1) is None


def test_no_forgetting_when_accuracy_constant():
    m = AccuracyMatrix.from_percent([[70.0], [70.0, 60.0], [70.0, 60.0, 40.0]])
    assert forgetting(m, 3) == 0.0


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 6).flatmap(lambda t: st.lists(
    st.lists(st.integers(0, 10_000), min_size=t, max_size=t), min_size=t, max_size=t)))
def test_forgetting_matches_naive(raw):
    t = len(raw)
    rows = [[raw[l][j] / 100.0 for j in range(l + 1)] for l in range(t)]
    m = AccuracyMatrix.from_percent(rows)
    assert forgetting(m, t) == pytest.approx(naive_forgetting(rows, t), abs=1e-9)


def test_cumulative_is_pooled_over_samples():
    m = AccuracyMatrix("server", 2)
    m.record(1, 1, 9, 10)
    m.record(2, 1, 5, 10)
    m.record(2, 2, 30, 30)
    assert cumulative_accuracy(m, 1) == 90.0
    assert cumulative_accuracy(m, 2) == pytest.approx(100 * 35 / 40)


def test_unpopulated_rows_raise():
    m = AccuracyMatrix("server", 3)
    m.record(1, 1, 1, 2)
    with pytest.raises(KeyError):
        cumulative_accuracy(m, 2)
    with pytest.raises(KeyError):
        forgetting(m, 2)
    with pytest.raises(ValueError):
        m.record(1, 2, 1, 2)
    assert m.rows_done == 1


def test_matrix_text_round_trip(tmp_path):
    m = AccuracyMatrix("client3", 2)
    m.record(1, 1, 123, 1000)
    m.record(2, 1, 7, 9)
    m.write(tmp_path / "a.txt")
    back = AccuracyMatrix.read(tmp_path / "a.txt")
    assert back == m
    assert (tmp_path / "a.txt").read_text().splitlines()[0] == "# scope=client3 T=2"


def test_mean_std_format():
    assert mean_std([1.0, 3.0]) == "2.00 ± 1.00"
    assert mean_std([]) == "-"


def make_bundle(root, name, strategy, seed, rows, clients=()):
    d = root / name
    d.mkdir()
    AccuracyMatrix.from_percent(rows).write(d / "accuracy_server.txt")
    for k, crow in enumerate(clients):
        AccuracyMatrix.from_percent(crow, scope=f"client{k}").write(d / f"accuracy_client{k}.txt")
    (d / "manifest.json").write_text(json.dumps({"strategy": strategy, "seed": seed}))
    return d


def test_report_table_and_chart(tmp_path):
    a = make_bundle(tmp_path, "a", "ours", 0, [[90.0], [70.0, 80.0]], clients=[[[80.0], [60.0, 70.0]]])
    b = make_bundle(tmp_path, "b", "ours", 1, [[80.0], [60.0, 70.0]])
    c = make_bundle(tmp_path, "c", "kd_ft", 0, [[50.0], [10.0, 40.0]])
    paths = render_report([a, b, c], tmp_path / "rep")
    table = paths["table"].read_text().splitlines()
    assert table[0].split() == ["strategy", "runs", "-t1", "-t2", "F"]
    assert table[1].split() == ["ours", "2", "85.00", "70.00", "20.00"]
    assert table[2].split() == ["kd_ft", "1", "50.00", "25.00", "40.00"]
    assert paths["chart"].stat().st_size > 0
    assert "65.00 ± 0.00" in paths["clients"].read_text()


def test_report_partial_bundle_marks_missing(tmp_path):
    a = make_bundle(tmp_path, "a", "ours", 0, [[90.0], [None, None]])
    table = render_report([a], tmp_path / "rep")["table"].read_text().splitlines()
    assert table[1].split() == ["ours", "1", "90.00", "-", "-"]


def test_report_rejects_mismatched_task_counts(tmp_path):
    a = make_bundle(tmp_path, "a", "ours", 0, [[90.0], [70.0, 80.0]])
    b = make_bundle(tmp_path, "b", "ours", 1, [[90.0]])
    with pytest.raises(IncompatibleBundlesError):
        render_report([a, b], tmp_path / "rep")
