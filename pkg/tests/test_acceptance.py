"""Acceptance criteria, one test each.

Every test appends a single PASS/FAIL line to ``RESULTS``; the conftest hook
prints them at the end of the session. A criterion also fails when it runs
over its time budget. Training criteria carry the ``slow`` marker.
"""

import json
import math
import tempfile
import time
from fractions import Fraction

import numpy as np
import pytest

from lgn.checkpoint import load_checkpoint, save_checkpoint
from lgn.data import (
    DatasetManifest,
    Sample,
    SyntheticConfig,
    VideoEntry,
    dataset_stats,
    generate,
    load_dataset,
    prepare_samples,
    read_features,
    write_features,
)
from lgn.diagnostics import full_loss_gradcheck, op_gradcheck
from lgn.errors import AnnotationError, FormatError
from lgn.evaluation import MetricSpec, ablation_report, evaluate, score_predictions
from lgn.grad import Parameter, Tensor
from lgn.model import (
    FusionParams,
    LateGuidanceParams,
    LGNModel,
    ModelConfig,
    fuse,
    late_guide,
    localize,
    visual_head,
)
from lgn.moments import ClipFeatureSequence, MomentSpan, cell_to_span, temporal_iou, valid_mask
from lgn.text import Vocabulary, pad_batch
from lgn.training import LabelConfig, TrainConfig, masked_bce, soft_label, train

RESULTS: list[str] = []

# Learnability and ablation runs: 400 train / 100 test videos, one query each.
SYNTH = dict(n_videos=500, N=16, d_v=32, concepts=8, noise=0.3, split_fractions=(0.8, 0.0, 0.2))
TRAIN = dict(epochs=30, lr=3e-3, batch_size=16)


def verdict(number: int, title: str, ok: bool, detail: str, elapsed: float, budget: float | None) -> None:
    in_time = budget is None or elapsed < budget
    limit = f" / {budget:g}s" if budget is not None else ""
    line = f"{'PASS' if ok and in_time else 'FAIL'} criterion {number} ({title}): {detail} [{elapsed:.1f}s{limit}]"
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert in_time, line


def exact_iou(x: MomentSpan, y: MomentSpan) -> Fraction:
    x0, x1, y0, y1 = map(Fraction, (x.start_s, x.end_s, y.start_s, y.end_s))
    inter = max(Fraction(0), min(x1, y1) - max(x0, y0))
    return inter / ((x1 - x0) + (y1 - y0) - inter)


def three_branch(o: float, t_min: float, t_max: float) -> float:
    if o <= t_min:
        return 0.0
    if o >= t_max:
        return 1.0
    return (o - t_min) / (t_max - t_min)


def masked_cells(rng, shape, n):
    return np.where(valid_mask(n), rng.normal(size=shape), 0.0)


def tiny_model(**kw) -> LGNModel:
    cfg = ModelConfig(**{**dict(N=6, d_v=5, d_w=4, d_h=6, d_s=5, n_early=2, n_conv=3, n_late=2), **kw})
    return LGNModel(cfg, Vocabulary.build([["a", "red", "ball"], ["the", "cup", "falls"]]))


def test_criterion_1_equation_oracles():
    t0 = time.perf_counter()
    grid = [i / 100 for i in range(101)]
    label_ok = all(
        soft_label(o, LabelConfig(lo, hi)) == three_branch(o, lo, hi)
        for lo, hi in [(0.0, 0.5), (0.1, 0.9), (0.3, 0.7)]
        for o in grid
    )
    rng = np.random.default_rng(1)
    iou_err = 0.0
    for _ in range(1000):
        x0, y0 = rng.uniform(0, 100, 2)
        x = MomentSpan(x0, x0 + rng.uniform(0.01, 50))
        y = MomentSpan(y0, y0 + rng.uniform(0.01, 50))
        iou_err = max(iou_err, abs(temporal_iou(x, y) - float(exact_iou(x, y))))
    valid = valid_mask(8)
    bce_err = abs(masked_bce(np.full((3, 8, 8), 0.5), rng.random((3, 8, 8)), valid).item() - math.log(2))
    ok = label_ok and iou_err <= 1e-12 and bce_err <= 1e-12
    detail = f"soft_label grid exact={label_ok}, IoU max err {iou_err:.1e}, |BCE(0.5) - ln2| {bce_err:.1e}"
    verdict(1, "equation oracles", ok, detail, time.perf_counter() - t0, 5)


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    op_worst, loss_worst, worst_op = 0.0, 0.0, ""
    for seed in range(5):
        per_op = op_gradcheck(seed)
        name = max(per_op, key=per_op.get)
        if per_op[name] > op_worst:
            op_worst, worst_op = per_op[name], name
        # N=4, d_v=6, d_h=8, d_s=5, three-token queries
        loss_worst = max(loss_worst, full_loss_gradcheck(seed))
    ok = op_worst <= 1e-4 and loss_worst <= 1e-4
    detail = f"25 ops worst {op_worst:.1e} ({worst_op}), full loss worst {loss_worst:.1e}, 5 seeds"
    verdict(2, "gradient suite", ok, detail, time.perf_counter() - t0, 60)


def _mask_preserved(rng) -> bool:
    invalid = ~valid_mask(6)
    ids, lengths = pad_batch([[2, 3], [4, 5, 6]])
    for early in (True, False):
        for late in (True, False):
            for norm in ("joint", "per_channel"):
                model = tiny_model(use_early=early, use_late=late, late_norm=norm)
                trace = []
                cells = masked_cells(rng, (2, 5, 6, 6), 6)
                model.forward_maps(cells, ids, lengths, training=True, rng=rng, trace=trace)
                for _, t in trace:
                    off = t.data[:, invalid]
                    if not (np.all(off == 0) and not np.signbit(off).any()):
                        return False
    return True


def _unit_norm_error(rng) -> float:
    valid = valid_mask(6)
    P = Parameter
    fp = FusionParams(P("vW", rng.normal(size=(6, 6))), P("vb", rng.normal(size=6)),
                      P("sW", rng.normal(size=(6, 5))), P("sb", rng.normal(size=6)))
    fused = fuse(Tensor(masked_cells(rng, (2, 6, 6, 6), 6)), Tensor(rng.normal(size=(2, 5))), fp).data
    lp = LateGuidanceParams(P("W", rng.normal(size=(6, 5))), P("b", rng.normal(size=6)))
    guided = late_guide(Tensor(masked_cells(rng, (2, 6, 6, 6), 6)), Tensor(rng.normal(size=(2, 5))), lp).data
    return max(float(np.abs(np.linalg.norm(out, axis=1)[:, valid] - 1.0).max()) for out in (fused, guided))


def _homogeneity_error(rng) -> float:
    C = Tensor(masked_cells(rng, (2, 6, 6, 6), 6))
    f_s = Tensor(rng.normal(size=(2, 5)))
    W, b = rng.normal(size=(6, 5)), rng.normal(size=6)
    worst = 0.0
    for norm in ("joint", "per_channel"):
        base = late_guide(C, f_s, LateGuidanceParams(Parameter("W", W), Parameter("b", b)), norm).data
        for c in (0.5, 2.0, 10.0):
            scaled = late_guide(C, f_s, LateGuidanceParams(Parameter("W", c * W), Parameter("b", c * b)), norm).data
            worst = max(worst, float(np.abs(base - scaled).max()))
    return worst


def _shared_parameters_ok() -> bool:
    for n_early, n_late in [(1, 0), (2, 3), (4, 3)]:
        model = tiny_model(n_early=n_early, n_late=n_late)
        names = model.params.names()
        if names.count("early.lang.W") != 1 or names.count("late.lang.W") != 1 or len(names) != len(set(names)):
            return False
    return True


def _metric_monotone_sets(rng, count=100) -> int:
    n, dur = 6, 12.0
    valid = valid_mask(n)
    spec = MetricSpec(n_values=[1, 2, 3, 5, 10], m_values=[0.1, 0.3, 0.5, 0.7, 0.9])
    good = 0
    for _ in range(count):
        maps, samples = [], []
        for q in range(10):
            a = int(rng.integers(n))
            b = int(rng.integers(a, n))
            maps.append(np.where(valid, rng.random((n, n)), 0.0))
            samples.append(Sample(f"q{q}", "v", np.zeros(1), [2], cell_to_span(a, b, n, dur), dur))
        report, _ = score_predictions(maps, samples, n, spec)
        g = np.array([[report.get(k, m) for m in spec.m_values] for k in spec.n_values])
        good += bool(np.all((g >= 0) & (g <= 100)) and np.all(np.diff(g, axis=0) >= 0) and np.all(np.diff(g, axis=1) <= 0))
    return good


def test_criterion_3_structural_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mask_ok = _mask_preserved(rng)
    norm_err = _unit_norm_error(rng)
    homog_err = _homogeneity_error(rng)
    shared_ok = _shared_parameters_ok()
    monotone = _metric_monotone_sets(rng)
    ok = mask_ok and norm_err <= 1e-9 and homog_err <= 1e-9 and shared_ok and monotone == 100
    detail = (f"mask bit-zero={mask_ok}, unit-norm err {norm_err:.1e}, homogeneity err {homog_err:.1e}, "
              f"single W^M/W^M'={shared_ok}, monotone sets {monotone}/100")
    verdict(3, "structural invariants", ok, detail, time.perf_counter() - t0, 30)


def test_criterion_4_ablation_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    sentences = [Tensor(rng.normal(size=(2, 5)) * s) for s in (1.0, 0.0, 50.0)]

    model = tiny_model(use_early=False)
    cells = Tensor(masked_cells(rng, (2, 5, 6, 6), 6))
    heads = [visual_head(cells, f, model.early, model.config, True, np.random.default_rng(0)).data for f in sentences]
    early_ok = all(np.array_equal(heads[0], h) for h in heads[1:])

    model = tiny_model(use_late=False)
    fused = Tensor(masked_cells(rng, (2, 6, 6, 6), 6))
    scores = [localize(fused, f, model.localizer, model.late, model.config).data for f in sentences]
    late_ok = all(np.array_equal(scores[0], s) for s in scores[1:])

    guided = tiny_model(use_late=True)
    sensitive = not np.array_equal(*(localize(fused, f, guided.localizer, guided.late, guided.config).data for f in sentences[:2]))
    ok = early_ok and late_ok and sensitive
    detail = f"head independent of f_s without early={early_ok}, localizer independent without late={late_ok}"
    verdict(4, "ablation contract", ok, detail, time.perf_counter() - t0, 10)


def _split_samples(ds, model):
    tr = prepare_samples(load_dataset(ds.manifest, "train"), model)
    te = prepare_samples(load_dataset(ds.manifest, "test"), model)
    return tr, te


@pytest.mark.slow
def test_criterion_5_synthetic_learnability():
    t0 = time.perf_counter()
    scores = []
    for seed in range(3):
        with tempfile.TemporaryDirectory() as d:
            ds = generate(SyntheticConfig(**SYNTH, seed=seed), d)
            vocab = Vocabulary.build(rec.tokens for _, rec in load_dataset(ds.manifest, "train"))
            model = LGNModel(ModelConfig(d_v=32, seed=seed), vocab)
            tr, te = _split_samples(ds, model)
            assert (len(tr), len(te)) == (400, 100)
            train(tr, model, TrainConfig(**TRAIN, seed=seed))
            scores.append(evaluate(te, model, MetricSpec(n_values=[1], m_values=[0.5])).get(1, 0.5))
    median = float(np.median(scores))
    detail = f"Rank1@0.5 per seed {scores}, median {median:.1f}% (need >= 90)"
    verdict(5, "synthetic learnability", median >= 90.0, detail, time.perf_counter() - t0, 300)


@pytest.mark.slow
def test_criterion_6_ablation_direction():
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as d:
        ds = generate(SyntheticConfig(**SYNTH, hardness="compositional", seed=0), d)
        rows = ablation_report(
            load_dataset(ds.manifest, "train"),
            load_dataset(ds.manifest, "test"),
            ModelConfig(d_v=32),
            TrainConfig(**TRAIN),
            seeds=[0, 1, 2],
        )
    by = {r.name: r for r in rows}
    ordered = sum(
        by["full"].per_seed[i] >= by["late"].per_seed[i] >= by["early"].per_seed[i] >= by["baseline"].per_seed[i]
        for i in range(3)
    )
    ok = by["full"].median > by["baseline"].median and ordered >= 2
    detail = ", ".join(f"{r.name} {r.per_seed} med {r.median:.0f}" for r in rows) + f"; ordering holds in {ordered}/3 seeds"
    verdict(6, "ablation direction", ok, detail, time.perf_counter() - t0, 1200)


@pytest.mark.slow
def test_criterion_7_determinism(tmp_path):
    t0 = time.perf_counter()
    ds = generate(SyntheticConfig(**{**SYNTH, "n_videos": 100}, seed=7), tmp_path / "data")
    vocab = Vocabulary.build(rec.tokens for _, rec in load_dataset(ds.manifest, "train"))
    reports = []
    for run in ("a", "b"):
        model = LGNModel(ModelConfig(d_v=32, seed=7), vocab)
        tr, te = _split_samples(ds, model)
        train(tr, model, TrainConfig(epochs=5, batch_size=16, lr=3e-3, seed=7), out=tmp_path / f"{run}.ckpt")
        reports.append(evaluate(te, model))
    same_ckpt = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    same_report = reports[0].scores == reports[1].scores and reports[0].fingerprint == reports[1].fingerprint

    loaded, _, _ = load_checkpoint(tmp_path / "a.ckpt")
    round_trip = loaded.params.names() == model.params.names() and all(
        p.data.tobytes() == q.data.tobytes() for p, q in zip(loaded.params, model.params)
    )
    save_checkpoint(tmp_path / "c.ckpt", loaded)
    again, _, _ = load_checkpoint(tmp_path / "c.ckpt")
    round_trip = round_trip and all(p.data.tobytes() == q.data.tobytes() for p, q in zip(again.params, loaded.params))
    _, te = _split_samples(ds, loaded)
    same_report = same_report and evaluate(te, loaded).scores == reports[0].scores
    ok = same_ckpt and same_report and round_trip
    detail = f"checkpoints identical={same_ckpt}, reports identical={same_report}, save/load bit-exact={round_trip}"
    verdict(7, "determinism", ok, detail, time.perf_counter() - t0, 300)


def test_criterion_8_format_compatibility(tmp_path):
    t0 = time.perf_counter()
    ds = generate(SyntheticConfig(n_videos=24, N=8, d_v=6, span_max=4, seed=8), tmp_path / "gen")
    generated_ok = len(list(load_dataset(ds.manifest))) == 24

    root = tmp_path / "fixture"
    (root / "features").mkdir(parents=True)
    (root / "annotations").mkdir()
    rng = np.random.default_rng(8)
    for vid, dur in (("v1", 10.0), ("v2", 20.0)):
        write_features(root / f"features/{vid}.lgnf", ClipFeatureSequence(vid, rng.normal(size=(5, 3)), dur))
    rows = [("v1", 6, 0.0, 4.0), ("v1", 4, 2.0, 10.0), ("v2", 5, 5.0, 8.0)]
    lines = [json.dumps({"video_id": v, "tokens": ["w"] * k, "start_s": a, "end_s": b}) for v, k, a, b in rows]
    (root / "annotations/train.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    videos = [VideoEntry(v, f"features/{v}.lgnf", "train") for v in ("v1", "v2")]
    DatasetManifest(root, videos, {"train": "annotations/train.jsonl"}).save()
    stats = dataset_stats(root)
    # words (6+4+5)/3, moments 3 over 2 videos, durations (4+8+3)/3
    stats_ok = (stats["mean_words"], stats["mean_moments_per_video"], stats["mean_duration_s"]) == (5.0, 1.5, 5.0)

    rejected = []
    good = root / "features/v1.lgnf"
    raw = good.read_bytes()
    for name, blob in (("bad magic", b"NOPE" + raw[4:]), ("truncated payload", raw[:-6])):
        path = tmp_path / f"{name.replace(' ', '_')}.lgnf"
        path.write_bytes(blob)
        try:
            read_features(path)
        except FormatError:
            rejected.append(name)
    with open(root / "annotations/train.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"video_id": "v1", "tokens": ["w"], "start_s": 8.0, "end_s": 12.0}) + "\n")
    try:
        list(load_dataset(root))
    except AnnotationError as exc:
        if ":4:" in str(exc):
            rejected.append("out-of-range annotation")
    ok = generated_ok and stats_ok and len(rejected) == 3
    detail = f"generated set loads={generated_ok}, stats {stats_ok}, rejected: {', '.join(rejected)}"
    verdict(8, "format compatibility", ok, detail, time.perf_counter() - t0, None)
