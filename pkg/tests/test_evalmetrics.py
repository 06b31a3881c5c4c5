import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skinpavit.evalmetrics import (
    EvalReport,
    build_report,
    format_reports,
    mae,
    mean_report,
    partition_shots,
    r2,
    split_by_panelist,
    weighted_group_mae,
)


def labels_with_counts(counts, width=1.0):
    return np.concatenate([np.full(c, (i + 0.5) * width) for i, c in enumerate(counts)])


def test_hand_partition():
    part = partition_shots(labels_with_counts([100, 60, 30, 10]))
    assert part.groups == ("many", "many", "medium", "few")
    np.testing.assert_array_equal(part.counts, [100, 60, 30, 10])


def test_threshold_boundaries():
    # 50 is exactly max/2 -> many; 25 exactly max/4 -> medium; 24 -> few
    part = partition_shots(labels_with_counts([100, 50, 49, 25, 24]))
    assert part.groups == ("many", "many", "medium", "medium", "few")


def test_single_bin_and_uniform():
    assert partition_shots([3.2, 3.7]).groups == ("many",)
    assert set(partition_shots(labels_with_counts([5] * 7)).groups) == {"many"}


def test_bins_anchored_at_multiples_of_width():
    part = partition_shots([2.5, 3.1, 4.9], bin_width=2.0)
    np.testing.assert_array_equal(part.edges, [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(part.counts, [2, 1])


def test_out_of_range_labels_use_edge_bins():
    part = partition_shots(labels_with_counts([10, 1]))
    assert list(part.group_of([-5.0, 0.5, 1.5, 99.0])) == ["many", "many", "few", "few"]


def test_partition_errors():
    with pytest.raises(ValueError):
        partition_shots([])
    with pytest.raises(ValueError):
        partition_shots([1.0], bin_width=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=200), st.floats(0.1, 5))
def test_groups_disjoint_and_exhaustive(labels, width):
    part = partition_shots(labels, width)
    assert part.counts.sum() == len(labels)
    g = part.group_of(labels)
    assert set(g) <= {"many", "medium", "few"}
    top = part.counts.max()
    assert np.all(part.counts[np.array(part.groups) == "many"] >= top / 2)


def test_thresholds_ignore_evaluation_data():
    train = labels_with_counts([40, 20, 5])
    part = partition_shots(train)
    before = part.group_of([0.5, 1.5, 2.5]).tolist()
    # evaluating on other data never moves the partition
    build_report([1, 2, 3, 4], [0.1, 1.1, 2.9, 9.0], part, "TEWL")
    assert part.group_of([0.5, 1.5, 2.5]).tolist() == before


def test_mae_r2_hand_cases():
    assert mae([5, 5], [0, 10]) == 5
    assert r2([5, 5], [0, 10]) == 0
    y = np.array([1.0, 4.0, 2.0])
    assert mae(y, y) == 0 and r2(y, y) == 1
    assert r2(np.full(3, y.mean()), y) == pytest.approx(0.0, abs=1e-15)
    assert mae([1, 2, 3], [1, 1, 1], mask=[False, True, True]) == 1.5


def test_metric_errors():
    with pytest.raises(ValueError):
        mae([1, 2], [1])
    with pytest.raises(ValueError):
        r2([1, 2], [3, 3])
    with pytest.raises(ValueError):
        r2([1], [1])
    with pytest.raises(ValueError):
        mae([1.0], [1.0], mask=[False])


def loop_report(preds, labels, part):
    """Plain-Python oracle for the report fields."""
    groups = {"many": [], "medium": [], "few": []}
    total = 0.0
    for p, y in zip(preds, labels):
        b = int(np.floor(y / part.bin_width + 1e-12)) - part.first_bin
        b = min(max(b, 0), len(part.counts) - 1)
        groups[part.groups[b]].append(abs(p - y))
        total += abs(p - y)
    mean_y = sum(labels) / len(labels)
    ss_res = sum((y - p) ** 2 for p, y in zip(preds, labels))
    ss_tot = sum((y - mean_y) ** 2 for y in labels)
    per = {g: (sum(v) / len(v) if v else None) for g, v in groups.items()}
    return total / len(labels), per, 1 - ss_res / ss_tot


def test_report_matches_loop_oracle():
    rng = np.random.default_rng(0)
    train = rng.gamma(4.0, 3.0, 400)
    part = partition_shots(train)
    labels = rng.gamma(4.0, 3.0, 300)
    preds = labels + rng.normal(0, 2, 300)
    rep = build_report(preds, labels, part, "TEWL")
    all_, per, r2_ = loop_report(preds.tolist(), labels.tolist(), part)
    assert rep.mae_all == pytest.approx(all_, abs=1e-9)
    assert rep.r2 == pytest.approx(r2_, abs=1e-9)
    for g in ("many", "medium", "few"):
        if per[g] is None:
            assert getattr(rep, f"mae_{g}") is None
        else:
            assert getattr(rep, f"mae_{g}") == pytest.approx(per[g], abs=1e-9)


def test_empty_group_reported_absent():
    part = partition_shots(labels_with_counts([100, 60, 30, 10]))
    rep = build_report([0.4, 0.6], [0.5, 0.7], part, "SH")
    assert rep.mae_many is not None
    assert rep.mae_medium is None and rep.mae_few is None
    assert rep.group_sizes == {"many": 2, "medium": 0, "few": 0}
    assert "-" in rep.row()


def test_group_weighted_mae_equals_overall():
    rng = np.random.default_rng(3)
    part = partition_shots(labels_with_counts([100, 60, 30, 10]))
    labels = rng.uniform(-1, 5, 1000)
    preds = rng.uniform(-1, 5, 1000)
    rep = build_report(preds, labels, part, "TEWL")
    assert weighted_group_mae(rep) == pytest.approx(rep.mae_all, abs=1e-9)


def test_report_serialization():
    rep = EvalReport("TEWL", 3, 1.0, 0.5, None, 2.0, 0.7, {"many": 1, "medium": 0, "few": 2}, "E")
    import json

    assert json.loads(rep.to_json())["mae_medium"] is None
    table = format_reports([rep])
    assert table.splitlines()[0].split()[0] == "config"
    assert table.splitlines()[1].split()[0] == "E"


def test_mean_report():
    a = EvalReport("TEWL", 3, 1.0, 0.5, None, 2.0, 0.6, {}, "x")
    b = EvalReport("TEWL", 3, 3.0, 1.5, 1.0, 4.0, 0.8, {}, "x")
    m = mean_report([a, b])
    assert m.mae_all == 2.0 and m.r2 == pytest.approx(0.7)
    assert m.mae_medium is None


def test_split_by_panelist(small_ds):
    tr, va = split_by_panelist(small_ds, 1, seed=0)
    assert set(tr.panelists).isdisjoint(va.panelists)
    assert len(tr) + len(va) == len(small_ds)
    with pytest.raises(ValueError):
        split_by_panelist(small_ds, 3)
