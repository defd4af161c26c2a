"""Rank n @ tIoU=m evaluation and the four-row ablation table."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Sample
from .errors import ConfigError, IngestionError
from .model import ABLATIONS, LGNModel, ModelConfig, rank_proposals
from .moments import MomentSpan, temporal_iou, valid_mask
from .text import Vocabulary, pad_batch


@dataclass
class MetricSpec:
    n_values: list = field(default_factory=lambda: [1, 5])
    m_values: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    nms_iou: float | None = 0.5  # applied only to n > 1; Rank1 is the plain argmax
    strict: bool = False  # True: hit needs tIoU > m instead of >= m

    def __post_init__(self):
        if not self.n_values or any(int(n) < 1 for n in self.n_values):
            raise ConfigError(f"n values must be >= 1, got {self.n_values}")
        if not self.m_values or any(not 0.0 < m <= 1.0 for m in self.m_values):
            raise ConfigError(f"m values must lie in (0, 1], got {self.m_values}")
        if self.nms_iou is not None and not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou must lie in (0, 1], got {self.nms_iou}")
        self.n_values = sorted(int(n) for n in self.n_values)
        self.m_values = sorted(float(m) for m in self.m_values)


@dataclass
class MetricReport:
    scores: dict  # (n, m) -> percentage
    queries: int
    fingerprint: str

    def get(self, n: int, m: float) -> float:
        return self.scores[(n, m)]

    def to_json(self) -> dict:
        return {
            "queries": self.queries,
            "fingerprint": self.fingerprint,
            "metrics": {f"R{n}@{m:g}": v for (n, m), v in sorted(self.scores.items())},
        }

    def table(self) -> str:
        ns = sorted({n for n, _ in self.scores})
        ms = sorted({m for _, m in self.scores})
        head = ["metric"] + [f"tIoU={m:g}" for m in ms]
        rows = [[f"Rank{n}"] + [f"{self.scores[(n, m)]:.2f}" for m in ms] for n in ns]
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
        lines = [fmt(head)] + [fmt(r) for r in rows]
        lines.append(f"queries={self.queries} config={self.fingerprint}")
        return "\n".join(lines)


def query_hit(ranked: list[MomentSpan], gt: MomentSpan, n: int, m: float, strict: bool = False) -> bool:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    for span in ranked[:n]:
        iou = temporal_iou(span, gt)
        if (iou > m) if strict else (iou >= m):
            return True
    return False


def predict(model: LGNModel, samples: list[Sample], batch_size: int = 64) -> list[np.ndarray]:
    """Evaluation-mode score maps [N, N], one per sample, in input order."""
    out = []
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo : lo + batch_size]
        cells = np.stack([s.cells for s in batch])
        ids, lengths = pad_batch([s.ids for s in batch])
        p = model.forward_maps(cells, ids, lengths, training=False)
        out.extend(p.data[i] for i in range(len(batch)))
    return out


def score_predictions(
    maps: list[np.ndarray], samples: list[Sample], n_grid: int, spec: MetricSpec, fingerprint: str = ""
) -> tuple[MetricReport, list]:
    valid = valid_mask(n_grid)
    hits = {(n, m): 0 for n in spec.n_values for m in spec.m_values}
    top_n = max(spec.n_values)
    per_query = []
    for p, s in zip(maps, samples):
        plain = rank_proposals(p, valid, top_n, None, n_grid, s.duration_s)
        nms = plain if spec.nms_iou is None else rank_proposals(p, valid, top_n, spec.nms_iou, n_grid, s.duration_s)
        for n in spec.n_values:
            ranked = plain if n == 1 else nms
            for m in spec.m_values:
                hits[(n, m)] += query_hit(ranked, s.span, n, m, spec.strict)
        per_query.append((s, nms))
    total = len(samples)
    scores = {k: 100.0 * v / total for k, v in hits.items()}
    return MetricReport(scores, total, fingerprint), per_query


def evaluate(samples: list[Sample], model: LGNModel, spec: MetricSpec | None = None, csv_path=None) -> MetricReport:
    """Rank n @ tIoU=m percentages over ``samples``; optional per-query CSV dump."""
    spec = spec or MetricSpec()
    if not samples:
        raise IngestionError("evaluation set is empty")
    maps = predict(model, samples)
    report, per_query = score_predictions(maps, samples, model.config.N, spec, model.config.fingerprint())
    if csv_path is not None:
        write_query_csv(csv_path, per_query)
    return report


def write_query_csv(path, per_query) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "video_id", "gt_start", "gt_end", "rank", "start", "end", "tiou"])
        for s, ranked in per_query:
            for r, span in enumerate(ranked, 1):
                w.writerow(
                    [s.query_id, s.video_id, s.span.start_s, s.span.end_s, r, span.start_s, span.end_s,
                     f"{temporal_iou(span, s.span):.6f}"]
                )


# ---------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    name: str
    per_seed: list
    median: float
    delta: float


def ablation_report(
    train_pairs,
    test_pairs,
    base_config: ModelConfig,
    train_config,
    seeds: list[int],
    rows: tuple = ("baseline", "early", "late", "full"),
    metric: tuple = (1, 0.5),
) -> list[AblationRow]:
    """Train each ablation row once per seed and report median Rank1@tIoU0.5 and its gain over baseline.

    The seed sets both model initialization and the training shuffle/dropout
    stream, so identical rows under identical seeds give identical numbers.
    """
    from dataclasses import replace

    from .data import prepare_samples
    from .training import train

    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    for r in rows:
        if r not in ABLATIONS:
            raise ConfigError(f"unknown ablation row {r!r}")
    train_pairs, test_pairs = list(train_pairs), list(test_pairs)
    vocab = Vocabulary.build(rec.tokens for _, rec in train_pairs)
    d_v = train_pairs[0][0].d_v
    n, m = metric
    spec = MetricSpec(n_values=[n], m_values=[m])
    results = {}
    for r in rows:
        scores = []
        for seed in seeds:
            cfg = replace(base_config.ablation(r), seed=seed, d_v=d_v)
            model = LGNModel(cfg, vocab)
            tr = prepare_samples(train_pairs, model)
            te = prepare_samples(test_pairs, model)
            train(tr, model, replace(train_config, seed=seed))
            scores.append(evaluate(te, model, spec).get(n, m))
        results[r] = scores
    base = float(np.median(results["baseline"])) if "baseline" in results else 0.0
    out = []
    for r in rows:
        med = float(np.median(results[r]))
        out.append(AblationRow(r, results[r], med, med - base))
    return out


def ablation_table(rows: list[AblationRow]) -> str:
    labels = {"baseline": "Baseline", "early": "+ early modulation", "late": "+ late guidance", "full": "Full LGN"}
    lines = [f"{'method':<22}{'R1@0.5':>8}{'delta':>8}  per-seed"]
    for r in rows:
        seeds = " ".join(f"{s:.1f}" for s in r.per_seed)
        lines.append(f"{labels.get(r.name, r.name):<22}{r.median:>8.2f}{r.delta:>8.2f}  {seeds}")
    return "\n".join(lines)


def ablation_json(rows: list[AblationRow]) -> str:
    return json.dumps([{"name": r.name, "per_seed": r.per_seed, "median": r.median, "delta": r.delta} for r in rows], indent=1)
