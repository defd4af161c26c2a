import csv
import json

import numpy as np
import pytest
from conftest import TINY_MODEL, build
from hypothesis import given, settings
from hypothesis import strategies as st

from lgn.data import Sample, load_dataset
from lgn.errors import ConfigError, IngestionError
from lgn.evaluation import (
    MetricSpec,
    ablation_json,
    ablation_report,
    ablation_table,
    evaluate,
    query_hit,
    score_predictions,
)
from lgn.model import ModelConfig
from lgn.moments import MomentSpan, cell_to_span, temporal_iou, valid_mask
from lgn.training import TrainConfig


def sample(span, duration=8.0, qid="q"):
    return Sample(qid, "v", np.zeros((1, 1, 1)), [2], span, duration)


def one_hot_map(n, cell, low=0.1):
    p = np.where(valid_mask(n), low, 0.0)
    p[cell] = 0.9
    return p


def test_metric_spec_validation():
    for kwargs in ({"n_values": [0]}, {"m_values": [0.0]}, {"m_values": [1.2]}, {"nms_iou": 0.0}, {"n_values": []}):
        with pytest.raises(ConfigError):
            MetricSpec(**kwargs)
    assert MetricSpec(n_values=[5, 1], m_values=[0.7, 0.3]).n_values == [1, 5]


def test_query_hit_examples():
    gt = MomentSpan(0.0, 10.0)
    top = [MomentSpan(0.0, 6.0)]
    assert temporal_iou(top[0], gt) == pytest.approx(0.6)
    assert query_hit(top, gt, 1, 0.5)
    assert not query_hit(top, gt, 1, 0.7)


def test_query_hit_scans_first_n():
    gt = MomentSpan(4.0, 8.0)
    ranked = [MomentSpan(0.0, 2.0), MomentSpan(10.0, 12.0), MomentSpan(4.0, 8.0), MomentSpan(0.0, 1.0)]
    assert query_hit(ranked, gt, 5, 0.5)
    assert query_hit(ranked, gt, 3, 1.0)
    assert not query_hit(ranked, gt, 2, 0.1)


def test_query_hit_threshold_is_closed_unless_strict():
    gt = MomentSpan(0.0, 4.0)
    ranked = [MomentSpan(0.0, 2.0)]
    assert query_hit(ranked, gt, 1, 0.5)
    assert not query_hit(ranked, gt, 1, 0.5, strict=True)


def test_query_hit_edge_cases():
    assert not query_hit([], MomentSpan(0.0, 1.0), 1, 0.1)
    with pytest.raises(ValueError):
        query_hit([MomentSpan(0.0, 1.0)], MomentSpan(0.0, 1.0), 0, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(1, 4)), min_size=1, max_size=12), st.integers(0, 7), st.integers(1, 8))
def test_query_hit_tiny_threshold_means_any_overlap(cells, g0, glen):
    ranked = [cell_to_span(a, min(a + k - 1, 7), 8, 8.0) for a, k in cells]
    gt = cell_to_span(g0, min(g0 + glen - 1, 7), 8, 8.0)
    overlaps = any(temporal_iou(s, gt) > 0 for s in ranked)
    assert query_hit(ranked, gt, len(ranked), 1e-12) == overlaps


def test_perfect_single_query_scores_100_everywhere():
    n, dur = 8, 16.0
    gt = cell_to_span(2, 4, n, dur)
    report, _ = score_predictions([one_hot_map(n, (2, 4))], [sample(gt, dur)], n, MetricSpec())
    assert report.queries == 1
    assert all(v == 100.0 for v in report.scores.values())


def test_one_hit_one_miss_is_50_percent():
    n, dur = 8, 16.0
    maps = [one_hot_map(n, (2, 4)), one_hot_map(n, (6, 7))]
    samples = [sample(cell_to_span(2, 4, n, dur), dur, "a"), sample(cell_to_span(0, 1, n, dur), dur, "b")]
    report, _ = score_predictions(maps, samples, n, MetricSpec(n_values=[1], m_values=[0.5]))
    assert report.get(1, 0.5) == 50.0


def test_rank1_ignores_nms_and_rank5_uses_it():
    n, dur = 4, 4.0
    p = np.where(valid_mask(n), 0.0, 0.0)
    p[0, 1], p[0, 2], p[3, 3] = 0.9, 0.8, 0.1  # (0,2) overlaps the top cell with IoU 2/3
    gt = cell_to_span(0, 2, n, dur)
    s = sample(gt, dur)
    with_nms, per_query = score_predictions([p], [s], n, MetricSpec(n_values=[1, 2], m_values=[1.0], nms_iou=0.5))
    plain, _ = score_predictions([p], [s], n, MetricSpec(n_values=[1, 2], m_values=[1.0], nms_iou=None))
    assert with_nms.get(1, 1.0) == plain.get(1, 1.0) == 0.0
    assert plain.get(2, 1.0) == 100.0
    assert with_nms.get(2, 1.0) == 0.0
    assert cell_to_span(0, 2, n, dur) not in per_query[0][1]


@pytest.mark.parametrize("seed", range(100))
def test_report_monotone_in_n_and_m(seed):
    rng = np.random.default_rng(seed)
    n, dur = 6, 12.0
    valid = valid_mask(n)
    maps, samples = [], []
    for q in range(8):
        maps.append(np.where(valid, rng.random((n, n)), 0.0))
        a = int(rng.integers(n))
        b = int(rng.integers(a, n))
        samples.append(sample(cell_to_span(a, b, n, dur), dur, f"q{q}"))
    spec = MetricSpec(n_values=[1, 2, 3, 5, 10], m_values=[0.1, 0.3, 0.5, 0.7, 0.9], nms_iou=[None, 0.5][seed % 2])
    report, _ = score_predictions(maps, samples, n, spec)
    grid = np.array([[report.get(k, m) for m in spec.m_values] for k in spec.n_values])
    assert np.all((grid >= 0) & (grid <= 100))
    assert np.all(np.diff(grid, axis=0) >= 0)
    assert np.all(np.diff(grid, axis=1) <= 0)


def test_report_formats():
    n, dur = 8, 16.0
    report, _ = score_predictions([one_hot_map(n, (2, 4))], [sample(cell_to_span(2, 4, n, dur), dur)], n, MetricSpec(), "abc")
    obj = report.to_json()
    assert obj["queries"] == 1 and obj["fingerprint"] == "abc"
    assert set(obj["metrics"]) == {f"R{k}@{m}" for k in (1, 5) for m in (0.3, 0.5, 0.7)}
    json.dumps(obj)
    lines = report.table().splitlines()
    assert lines[0].split() == ["metric", "tIoU=0.3", "tIoU=0.5", "tIoU=0.7"]
    assert lines[1].split() == ["Rank1", "100.00", "100.00", "100.00"]
    assert lines[-1] == "queries=1 config=abc"
    assert len({len(line) for line in lines[:3]}) == 1


def test_evaluate_is_pure_and_writes_csv(tiny_dataset, tmp_path):
    model, samples = build(tiny_dataset, "test")
    a = evaluate(samples, model, csv_path=tmp_path / "q.csv")
    b = evaluate(samples, model)
    assert a.scores == b.scores and a.fingerprint == b.fingerprint == model.config.fingerprint()
    with open(tmp_path / "q.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["query_id"] for r in rows} == {s.query_id for s in samples}
    assert all(0.0 <= float(r["tiou"]) <= 1.0 for r in rows)
    with pytest.raises(IngestionError):
        evaluate([], model)


def test_evaluate_missing_feature_file_names_video(tiny_dataset):
    victim = sorted((tiny_dataset.root / "features").iterdir())[0]
    victim.unlink()
    with pytest.raises(IngestionError, match=victim.stem):
        list(load_dataset(tiny_dataset.manifest))


def _ablate(ds, rows, seeds=(0,)):
    return ablation_report(
        load_dataset(ds.manifest, "train"),
        load_dataset(ds.manifest, "test"),
        ModelConfig(**TINY_MODEL),
        TrainConfig(epochs=1, batch_size=4),
        list(seeds),
        rows=rows,
    )


def test_ablation_baseline_delta_is_zero_and_runs_repeat(tiny_dataset):
    first = _ablate(tiny_dataset, ("baseline", "full"), seeds=(0, 1))
    again = _ablate(tiny_dataset, ("baseline", "full"), seeds=(0, 1))
    assert first[0].name == "baseline" and first[0].delta == 0.0
    assert [(r.per_seed, r.median) for r in first] == [(r.per_seed, r.median) for r in again]
    assert first[1].delta == first[1].median - first[0].median
    table = ablation_table(first).splitlines()
    assert table[1].startswith("Baseline") and table[2].startswith("Full LGN")
    assert [r["name"] for r in json.loads(ablation_json(first))] == ["baseline", "full"]


def test_ablation_errors(tiny_dataset):
    with pytest.raises(ConfigError):
        _ablate(tiny_dataset, ("baseline",), seeds=())
    with pytest.raises(ConfigError):
        _ablate(tiny_dataset, ("baseline", "middle"))
