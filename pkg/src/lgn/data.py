"""Feature/annotation files, dataset manifests, synthetic benchmarks and statistics.

On-disk dataset layout::

    <root>/manifest.json
    <root>/features/<video_id>.lgnf
    <root>/annotations/{train,val,test}.jsonl

Feature files: ``b"LGNF"``, then u32 LE version (1), T, d_v, duration in
milliseconds, then T*d_v float32 LE values row-major.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    AnnotationError,
    ConfigError,
    FormatError,
    IngestionError,
    InvalidSpanError,
    ResolutionError,
    ValidationFailure,
)
from .moments import AnnotationRecord, ClipFeatureSequence, MomentSpan, cell_to_span

FEATURE_MAGIC = b"LGNF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------- feature files


def write_features(path: str | Path, seq: ClipFeatureSequence) -> None:
    ms = int(round(seq.duration_s * 1000.0))
    feats = np.ascontiguousarray(seq.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, seq.T, seq.d_v, ms))
        fh.write(feats.tobytes())


def read_features(path: str | Path, video_id: str | None = None) -> ClipFeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, t, d_v, ms = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    need = t * d_v * 4
    have = len(raw) - _HEADER.size
    if have != need:
        raise FormatError(f"{path}: header declares {t}x{d_v} floats ({need} bytes), payload has {have}")
    if t < 1 or ms == 0:
        raise FormatError(f"{path}: empty clip sequence or zero duration")
    feats = np.frombuffer(raw, dtype="<f4", count=t * d_v, offset=_HEADER.size).reshape(t, d_v)
    try:
        return ClipFeatureSequence(video_id or path.stem, feats.astype(np.float64), ms / 1000.0)
    except ValidationFailure as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- annotations


def annotation_to_json(rec: AnnotationRecord) -> str:
    return json.dumps(
        {"video_id": rec.video_id, "tokens": list(rec.tokens), "start_s": rec.span.start_s, "end_s": rec.span.end_s}
    )


def read_annotations(path: str | Path) -> Iterator[tuple[int, AnnotationRecord]]:
    """Yield (line number, record); malformed lines raise :class:`AnnotationError`."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                vid, tokens = obj["video_id"], obj["tokens"]
                start, end = float(obj["start_s"]), float(obj["end_s"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise AnnotationError(f"{path}:{lineno}: malformed annotation: {exc}") from None
            if not isinstance(vid, str) or not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                raise AnnotationError(f"{path}:{lineno}: video_id must be a string and tokens a list of strings")
            try:
                span = MomentSpan(start, end)
            except InvalidSpanError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from None
            yield lineno, AnnotationRecord(vid, tokens, span, query_id=f"{path.stem}-{lineno}")


# ---------------------------------------------------------------- manifests


@dataclass
class VideoEntry:
    video_id: str
    feature_file: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    videos: list
    annotations: dict  # split -> relative path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise ResolutionError(f"no dataset manifest at {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
            videos = [VideoEntry(v["video_id"], v["feature_file"], v["split"]) for v in obj["videos"]]
            annotations = dict(obj["annotations"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed manifest: {exc}") from None
        for v in videos:
            if v.split not in SPLITS:
                raise FormatError(f"{path}: video {v.video_id} has unknown split {v.split!r}")
        return cls(path.parent, videos, annotations)

    def save(self, extra: dict | None = None) -> None:
        obj = {
            "format": "lgn-dataset",
            "version": 1,
            "videos": [asdict(v) for v in self.videos],
            "annotations": self.annotations,
        }
        if extra:
            obj.update(extra)
        (self.root / MANIFEST_NAME).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")

    def videos_in(self, split: str | None) -> list:
        return [v for v in self.videos if split is None or v.split == split]


def load_dataset(manifest: str | Path | DatasetManifest, split: str | None = None):
    """Stream validated (ClipFeatureSequence, AnnotationRecord) pairs.

    Raises :class:`ResolutionError` for annotations naming an unknown video,
    :class:`FormatError` for bad feature files and :class:`AnnotationError`
    (with line number) for spans outside the video.
    """
    m = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)
    by_id = {v.video_id: v for v in m.videos}
    cache: dict[str, ClipFeatureSequence] = {}
    splits = [split] if split else [s for s in SPLITS if s in m.annotations]
    for sp in splits:
        if sp not in m.annotations:
            raise ResolutionError(f"dataset has no {sp!r} annotations")
        ann_path = m.root / m.annotations[sp]
        for lineno, rec in read_annotations(ann_path):
            entry = by_id.get(rec.video_id)
            if entry is None:
                raise ResolutionError(f"{ann_path}:{lineno}: video {rec.video_id!r} has no feature file in the manifest")
            seq = cache.get(rec.video_id)
            if seq is None:
                fpath = m.root / entry.feature_file
                if not fpath.exists():
                    raise ResolutionError(f"{ann_path}:{lineno}: feature file for {rec.video_id!r} is missing ({fpath})")
                seq = cache[rec.video_id] = read_features(fpath, rec.video_id)
            if rec.span.end_s > seq.duration_s + 1e-9:
                raise AnnotationError(
                    f"{ann_path}:{lineno}: span [{rec.span.start_s}, {rec.span.end_s}] outside video "
                    f"{rec.video_id!r} of {seq.duration_s}s"
                )
            yield seq, rec


def dataset_stats(manifest: str | Path | DatasetManifest, split: str | None = None) -> dict:
    """Mean words per query, mean moments per video and mean moment duration."""
    m = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)
    words, durations = [], []
    for _, rec in load_dataset(m, split):
        words.append(len(rec.tokens))
        durations.append(rec.span.length)
    n_videos = len(m.videos_in(split))
    if not words or n_videos == 0:
        raise IngestionError("dataset has no annotations")
    return {
        "queries": len(words),
        "videos": n_videos,
        "mean_words": float(np.mean(words)),
        "mean_moments_per_video": len(words) / n_videos,
        "mean_duration_s": float(np.mean(durations)),
    }


# ---------------------------------------------------------------- model-ready samples


@dataclass
class Sample:
    query_id: str
    video_id: str
    cells: np.ndarray  # pooled [d_v, N, N]
    ids: list
    span: MomentSpan
    duration_s: float
    tokens: list = field(default_factory=list)


def prepare_samples(pairs, model) -> list[Sample]:
    """Pool each video once and encode each query for ``model``."""
    pooled: dict[str, np.ndarray] = {}
    out = []
    for seq, rec in pairs:
        try:
            cells = pooled.get(seq.video_id)
            if cells is None:
                cells = pooled[seq.video_id] = model.prepare_video(seq)
            ids = model.encode_query(rec.tokens)
            rec.check_within(seq.duration_s)
        except (ValidationFailure, ValueError) as exc:
            raise IngestionError(f"sample {rec.query_id or rec.video_id}: {exc}") from exc
        out.append(Sample(rec.query_id, rec.video_id, cells, ids, rec.span, seq.duration_s, list(rec.tokens)))
    return out


# ---------------------------------------------------------------- synthesis

_FILLERS_PRE = (("a", "person"), ("someone",), ("the", "person"), ("a", "man"), ("a", "woman"))
_FILLERS_POST = ((), ("again",), ("slowly",), ("for", "a", "while"))


@dataclass
class SyntheticConfig:
    n_videos: int = 200
    N: int = 16
    d_v: int = 32
    duration_s: float = 32.0
    concepts: int = 8
    words_per_concept: int = 2
    noise: float = 0.3
    span_min: int = 2
    span_max: int = 8
    hardness: str = "easy"
    split_fractions: tuple = (0.5, 0.25, 0.25)
    seed: int = 0

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if self.concepts < 2:
            raise ConfigError(f"need at least 2 concepts, got {self.concepts}")
        if self.n_videos < 1 or self.N < 1 or self.d_v < 1 or self.words_per_concept < 1:
            raise ConfigError("n_videos, N, d_v and words_per_concept must be >= 1")
        if not 1 <= self.span_min <= self.span_max <= self.N:
            raise ConfigError(f"span range [{self.span_min}, {self.span_max}] must lie within [1, {self.N}]")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not self.duration_s > 0 or round(self.duration_s * 1000) >= 2**32:
            raise ConfigError(f"duration must be positive and fit in u32 milliseconds, got {self.duration_s}")
        if self.hardness not in ("easy", "compositional"):
            raise ConfigError(f"hardness must be 'easy' or 'compositional', got {self.hardness!r}")
        if self.hardness == "compositional":
            if self.concepts < 4:
                raise ConfigError("compositional mode needs at least 4 concepts")
            if 4 * self.span_min > self.N:
                raise ConfigError(f"compositional mode places 4 segments; 4*span_min must be <= N={self.N}")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three non-negative numbers summing to 1, got {fr}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d


@dataclass
class SyntheticDataset:
    """Handle on a generated dataset plus the generator's hidden truth."""

    root: Path
    config: SyntheticConfig
    prototypes: np.ndarray  # [C, d_v], float32-exact
    background: np.ndarray  # [d_v]
    concept_words: list  # concept -> list of words

    @property
    def manifest(self) -> Path:
        return self.root / MANIFEST_NAME


def _concept_words(cfg: SyntheticConfig) -> list:
    return [[f"c{c}w{j}" for j in range(cfg.words_per_concept)] for c in range(cfg.concepts)]


def _place_segments(rng: np.random.Generator, lengths: list, n: int) -> list:
    """Non-overlapping (a, b) placements for ``lengths`` in shuffled order with random gaps."""
    order = rng.permutation(len(lengths))
    free = n - int(sum(lengths))
    gaps = rng.multinomial(free, np.full(len(lengths) + 1, 1.0 / (len(lengths) + 1)))
    spans = [None] * len(lengths)
    pos = int(gaps[0])
    for k, i in enumerate(order):
        spans[i] = (pos, pos + lengths[i] - 1)
        pos += lengths[i] + int(gaps[k + 1])
    return spans


def _query(rng: np.random.Generator, words: list) -> list:
    pre = _FILLERS_PRE[rng.integers(len(_FILLERS_PRE))]
    post = _FILLERS_POST[rng.integers(len(_FILLERS_POST))]
    return list(pre) + words + list(post)


def _draw_sample(cfg: SyntheticConfig, rng, protos, background, words):
    n = cfg.N
    feats = np.repeat(background[None, :], n, axis=0)
    if cfg.hardness == "easy":
        c = int(rng.integers(cfg.concepts))
        length = int(rng.integers(cfg.span_min, cfg.span_max + 1))
        a = int(rng.integers(0, n - length + 1))
        b = a + length - 1
        feats[a : b + 1] = protos[c]
        tokens = _query(rng, [words[c][rng.integers(len(words[c]))]])
    else:
        # target pair, each of its concepts alone, and an unrelated decoy pair
        c1, c2, c3, c4 = (int(x) for x in rng.choice(cfg.concepts, size=4, replace=False))
        hi = min(cfg.span_max, n // 4)
        lengths = [int(rng.integers(cfg.span_min, hi + 1)) for _ in range(4)]
        spans = _place_segments(rng, lengths, n)
        contents = [protos[c1] + protos[c2], protos[c1], protos[c2], protos[c3] + protos[c4]]
        for (sa, sb), vec in zip(spans, contents):
            feats[sa : sb + 1] = vec
        a, b = spans[0]
        pair = [words[c1][rng.integers(len(words[c1]))], words[c2][rng.integers(len(words[c2]))]]
        if rng.random() < 0.5:
            pair.reverse()
        tokens = _query(rng, [pair[0], "and", pair[1]])
    if cfg.noise > 0:
        feats = feats + rng.normal(0.0, cfg.noise, size=feats.shape)
    return feats.astype(np.float32), (a, b), tokens


def generate(cfg: SyntheticConfig, out: str | Path) -> SyntheticDataset:
    """Write a synthetic dataset to ``out``; identical configs give identical bytes."""
    root = Path(out)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    protos = rng.normal(0.0, 1.0, size=(cfg.concepts, cfg.d_v)).astype(np.float32)
    background = (0.3 * rng.normal(0.0, 1.0, size=cfg.d_v)).astype(np.float32)
    words = _concept_words(cfg)

    order = rng.permutation(cfg.n_videos)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_videos))
    n_val = int(round(cfg.split_fractions[1] * cfg.n_videos))
    split_of = {}
    for rank, vi in enumerate(order):
        split_of[int(vi)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    lines = {s: [] for s in SPLITS}
    videos = []
    for vi in range(cfg.n_videos):
        vid = f"vid{vi:05d}"
        feats, (a, b), tokens = _draw_sample(cfg, rng, protos.astype(np.float64), background.astype(np.float64), words)
        seq = ClipFeatureSequence(vid, feats, cfg.duration_s)
        rel = f"features/{vid}.lgnf"
        write_features(root / rel, seq)
        sp = split_of[vi]
        videos.append(VideoEntry(vid, rel, sp))
        rec = AnnotationRecord(vid, tokens, cell_to_span(a, b, cfg.N, cfg.duration_s))
        lines[sp].append(annotation_to_json(rec))

    ann = {}
    for sp in SPLITS:
        rel = f"annotations/{sp}.jsonl"
        (root / rel).write_text("".join(line + "\n" for line in lines[sp]), encoding="utf-8")
        ann[sp] = rel
    DatasetManifest(root, videos, ann).save({"synthetic": cfg.to_dict()})
    return SyntheticDataset(root, cfg, protos, background, words)


def prototype_oracle(ds: SyntheticDataset, split: str | None = None) -> float:
    """Rank1 accuracy at tIoU 1.0 of a nearest-prototype labeler (easy mode).

    Each clip is labeled with its nearest prototype (background included); the
    predicted span is the longest run of the queried concept.
    """
    if ds.config.hardness != "easy":
        raise ConfigError("the prototype oracle is defined for easy mode only")
    word_to_concept = {w: c for c, ws in enumerate(ds.concept_words) for w in ws}
    refs = np.vstack([ds.prototypes.astype(np.float64), ds.background.astype(np.float64)[None]])
    hits = total = 0
    n = ds.config.N
    for seq, rec in load_dataset(ds.manifest, split):
        concept = next(word_to_concept[t] for t in rec.tokens if t in word_to_concept)
        d2 = ((seq.features[:, None, :] - refs[None]) ** 2).sum(-1)
        label = d2.argmin(axis=1)
        best, run_start, best_span = 0, None, None
        for t in range(n + 1):
            on = t < n and label[t] == concept
            if on and run_start is None:
                run_start = t
            if not on and run_start is not None:
                if t - run_start > best:
                    best, best_span = t - run_start, (run_start, t - 1)
                run_start = None
        total += 1
        if best_span is not None:
            pred = cell_to_span(best_span[0], best_span[1], n, seq.duration_s)
            hits += pred == rec.span
    return 100.0 * hits / total
