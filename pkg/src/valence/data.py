"""Multimodal sequence data: resampling to the 0.5 s grid, fusion, corpus I/O."""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels

WINDOW_S = 0.5
# tolerance for assigning timestamps to windows (timestamps come from CSV text)
_TIME_EPS = 1e-9


class LoadError(ValueError):
    """A corpus file is missing or violates its schema."""


class Modality(enum.Enum):
    AUDIO = "audio"
    TEXT = "text"
    VISUAL = "visual"

    @property
    def letter(self) -> str:
        return self.value[0].upper()

    @property
    def default_dim(self) -> int:
        return DEFAULT_DIMS[self]

    @property
    def default_period(self) -> float:
        return DEFAULT_PERIODS[self]


CANONICAL_ORDER = (Modality.AUDIO, Modality.TEXT, Modality.VISUAL)
DEFAULT_DIMS = {Modality.AUDIO: 88, Modality.TEXT: 300, Modality.VISUAL: 20}
DEFAULT_PERIODS = {Modality.AUDIO: 0.5, Modality.TEXT: 5.0, Modality.VISUAL: 1.0 / 30.0}
COMBINATIONS = ("A", "T", "V", "AT", "TV", "AV", "ATV")
PARTITIONS = ("Train", "Val", "Test")


def parse_combination(combo: str) -> tuple[Modality, ...]:
    """``"TV"`` -> (TEXT, VISUAL), always in canonical order."""
    letters = combo.strip().upper()
    by_letter = {m.letter: m for m in CANONICAL_ORDER}
    if not letters or any(c not in by_letter for c in letters) or len(set(letters)) != len(letters):
        raise ValueError(f"invalid modality combination {combo!r}")
    return tuple(m for m in CANONICAL_ORDER if m.letter in letters)


def combination_name(mods: Iterable[Modality]) -> str:
    return "".join(m.letter for m in CANONICAL_ORDER if m in set(mods))


def n_windows_for(duration_s: float, period_s: float = WINDOW_S) -> int:
    return int(math.ceil(duration_s / period_s - _TIME_EPS))


@dataclass(frozen=True)
class ModalitySeries:
    modality: Modality
    frame_period_s: float
    frames: np.ndarray
    t_start: np.ndarray | None = None

    def __post_init__(self):
        if not self.frame_period_s > 0:
            raise ValueError(f"frame period must be positive, got {self.frame_period_s}")
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError(f"{self.modality.value}: non-finite frame values")
        object.__setattr__(self, "frames", frames)
        if self.t_start is None:
            object.__setattr__(self, "t_start", np.arange(frames.shape[0]) * self.frame_period_s)
        else:
            ts = np.asarray(self.t_start, dtype=np.float64)
            if ts.shape != (frames.shape[0],):
                raise ValueError("t_start must have one entry per frame")
            object.__setattr__(self, "t_start", ts)

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def resample_to_windows(series: ModalitySeries, n_windows: int | None = None, period_s: float = WINDOW_S):
    """Map a native-rate series onto ``period_s`` windows anchored at 0.

    Faster-than-window series are averaged over the frames whose start time
    falls in each window; slower series are held (repeated) over every
    window whose start lies inside the frame's span.  Windows with no frame
    are zero-filled and reported unobserved.
    """
    if not period_s > 0:
        raise ValueError(f"window period must be positive, got {period_s}")
    frames, starts, p = series.frames, series.t_start, series.frame_period_s
    if frames.shape[0] == 0:
        raise ValueError(f"{series.modality.value}: empty series")
    if p <= period_s + _TIME_EPS:
        assign = np.floor(starts / period_s + _TIME_EPS).astype(np.int64)
        rows = frames
        if n_windows is None:
            n_windows = int(assign.max()) + 1
    else:
        first = np.ceil(starts / period_s - _TIME_EPS).astype(np.int64)
        stop = np.ceil((starts + p) / period_s - _TIME_EPS).astype(np.int64)
        counts = np.maximum(stop - first, 0)
        src = np.repeat(np.arange(frames.shape[0]), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        assign = np.repeat(first, counts) + offs
        rows = frames[src]
        if n_windows is None:
            n_windows = int(stop.max())
    out, counts = _kernels.window_mean(assign, rows, n_windows)
    return out, counts > 0


@dataclass(frozen=True)
class FusedSequence:
    """Early-fused features on the common window grid.

    ``features`` holds the modality blocks side by side in canonical order;
    ``mask[t, m]`` says whether modality ``modalities[m]`` was observed in
    window ``t`` (unobserved blocks are zero).
    """

    features: np.ndarray
    mask: np.ndarray
    modalities: tuple[Modality, ...]
    dims: tuple[int, ...]
    window_period_s: float = WINDOW_S

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def offsets(self) -> dict[Modality, tuple[int, int]]:
        bounds = np.cumsum((0,) + self.dims)
        return {m: (int(bounds[i]), int(bounds[i + 1])) for i, m in enumerate(self.modalities)}

    def block(self, modality: Modality) -> np.ndarray:
        lo, hi = self.offsets()[modality]
        return self.features[:, lo:hi]

    def select(self, mods: Sequence[Modality]) -> "FusedSequence":
        missing = [m.value for m in mods if m not in self.modalities]
        if missing:
            raise ValueError(f"modalities not available: {missing}")
        offs = self.offsets()
        order = [m for m in CANONICAL_ORDER if m in set(mods)]
        cols = [self.features[:, offs[m][0] : offs[m][1]] for m in order]
        idx = [self.modalities.index(m) for m in order]
        return FusedSequence(
            features=np.concatenate(cols, axis=1),
            mask=self.mask[:, idx],
            modalities=tuple(order),
            dims=tuple(self.dims[i] for i in idx),
            window_period_s=self.window_period_s,
        )


def fuse(blocks: Mapping[Modality, tuple[np.ndarray, np.ndarray]], n_windows: int | None = None) -> FusedSequence:
    """Concatenate resampled blocks ``{modality: (matrix, observed)}``.

    Shorter blocks are padded with unobserved zero windows (up to
    ``n_windows`` if given, else the longest block); longer ones are cut.
    """
    for m in blocks:
        if not isinstance(m, Modality):
            raise ValueError(f"unknown modality tag {m!r}")
    if not blocks:
        raise ValueError("fuse needs at least one modality block")
    mods = tuple(m for m in CANONICAL_ORDER if m in blocks)
    T = n_windows if n_windows is not None else max(blocks[m][0].shape[0] for m in mods)
    feats, masks, dims = [], [], []
    for m in mods:
        mat, obs = blocks[m]
        mat = np.asarray(mat, dtype=np.float64)
        obs = np.asarray(obs, dtype=bool)
        d = mat.shape[1]
        block = np.zeros((T, d))
        flag = np.zeros(T, dtype=bool)
        n = min(T, mat.shape[0])
        block[:n] = mat[:n]
        flag[:n] = obs[:n]
        block[~flag] = 0.0
        feats.append(block)
        masks.append(flag)
        dims.append(d)
    return FusedSequence(np.concatenate(feats, axis=1), np.stack(masks, axis=1), mods, tuple(dims))


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    target_id: str
    duration_s: float
    partition: str
    modalities: dict[Modality, ModalitySeries] = field(default_factory=dict)
    gold: np.ndarray | None = None
    gender: str = ""

    @property
    def T(self) -> int:
        return n_windows_for(self.duration_s)

    def fused(self, mods: Sequence[Modality] | None = None, dims: Mapping[Modality, int] | None = None) -> FusedSequence:
        """Resample and fuse; a requested modality with no frames at all
        becomes an all-unobserved zero block of its declared dimension."""
        T = self.T
        use = [m for m in CANONICAL_ORDER if (m in self.modalities if mods is None else m in mods)]
        dims = {**DEFAULT_DIMS, **(dims or {})}
        blocks = {}
        for m in use:
            if m in self.modalities:
                blocks[m] = resample_to_windows(self.modalities[m], T)
            else:
                blocks[m] = (np.zeros((T, dims[m])), np.zeros(T, dtype=bool))
        return fuse(blocks, T)


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    target_id: str
    partition: str
    duration_s: float
    gender: str = ""


@dataclass
class Corpus:
    records: list[VideoRecord]

    def partition(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.partition == name]

    @property
    def by_partition(self) -> dict[str, list[VideoRecord]]:
        return {p: self.partition(p) for p in PARTITIONS}

    def training_view(self) -> "TrainingSplits":
        return TrainingSplits(tuple(self.partition("Train")), tuple(self.partition("Val")))

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class TrainingSplits:
    """The only corpus handle the training code receives: no Test records."""

    train: tuple[VideoRecord, ...]
    val: tuple[VideoRecord, ...]

    def __post_init__(self):
        for r in self.train + self.val:
            assert r.partition != "Test", f"Test video {r.video_id} leaked into training splits"


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["video_id", "target_id", "partition", "duration_s", "gender"]
RATINGS_HEADER = ["video_id", "observer_id", "t_s", "rating", "checks_correct", "made_changes"]
GOLD_HEADER = ["video_id", "t_s", "ewe", "sd"]


def fmt(x: float) -> str:
    """Shortest text that round-trips the float exactly."""
    return repr(float(x))


def features_filename(m: Modality) -> str:
    return f"features_{m.value}.csv"


def _open_csv(path: Path, header: list[str] | None = None, prefix: list[str] | None = None):
    if not path.exists():
        raise LoadError(f"missing file: {path}")
    fh = path.open(newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        got = next(reader)
    except StopIteration:
        fh.close()
        raise LoadError(f"{path}:1: empty file (no header)") from None
    if header is not None and got != header:
        fh.close()
        raise LoadError(f"{path}:1: expected header {','.join(header)}, got {','.join(got)}")
    if prefix is not None and got[: len(prefix)] != prefix:
        fh.close()
        raise LoadError(f"{path}:1: header must start with {','.join(prefix)}")
    return fh, reader, got


def _num(path, line, col, name, text, kind=float):
    try:
        v = kind(text)
    except ValueError:
        raise LoadError(f"{path}:{line}:{col}: column {name!r}: cannot parse {text!r}") from None
    if kind is float and not math.isfinite(v):
        raise LoadError(f"{path}:{line}:{col}: column {name!r}: non-finite value {text!r}")
    return v


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    fh, reader, _ = _open_csv(path, MANIFEST_HEADER)
    entries, seen = [], set()
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise LoadError(f"{path}:{line}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
            vid, tgt, part, dur, gender = row
            if part not in PARTITIONS:
                raise LoadError(f"{path}:{line}:3: column 'partition': unknown partition {part!r}")
            d = _num(path, line, 4, "duration_s", dur)
            if d <= 0:
                raise LoadError(f"{path}:{line}:4: column 'duration_s': must be positive")
            if vid in seen:
                raise LoadError(f"{path}:{line}:1: duplicate video_id {vid!r}")
            seen.add(vid)
            entries.append(ManifestEntry(vid, tgt, part, d, gender))
    return sorted(entries, key=lambda e: e.video_id)


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in sorted(entries, key=lambda e: e.video_id):
            w.writerow([e.video_id, e.target_id, e.partition, fmt(e.duration_s), e.gender])


def read_features(path: str | Path, dim: int | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``{video_id: (t_start, frames)}`` from a ``features_<modality>.csv``."""
    path = Path(path)
    fh, reader, header = _open_csv(path, prefix=["video_id", "t_start_s"])
    d = len(header) - 2
    expect = ["video_id", "t_start_s"] + [f"f{i}" for i in range(d)]
    if header != expect:
        fh.close()
        raise LoadError(f"{path}:1: feature columns must be f0..f{d - 1}")
    if dim is not None and d != dim:
        fh.close()
        raise LoadError(f"{path}:1: expected {dim} feature columns, got {d}")
    times: dict[str, list[float]] = defaultdict(list)
    rows: dict[str, list[np.ndarray]] = defaultdict(list)
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise LoadError(f"{path}:{line}: expected {d + 2} columns, got {len(row)}")
            vid = row[0]
            t = _num(path, line, 2, "t_start_s", row[1])
            try:
                vals = np.array(row[2:], dtype=np.float64)
            except ValueError:
                for j, txt in enumerate(row[2:]):
                    _num(path, line, j + 3, f"f{j}", txt)
                raise
            if not np.all(np.isfinite(vals)):
                j = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise LoadError(f"{path}:{line}:{j + 3}: column 'f{j}': non-finite value")
            times[vid].append(t)
            rows[vid].append(vals)
    out = {}
    for vid in times:
        ts = np.array(times[vid])
        fr = np.stack(rows[vid]) if rows[vid] else np.zeros((0, d))
        order = np.argsort(ts, kind="stable")
        out[vid] = (ts[order], fr[order])
    return out


def write_features(path: str | Path, per_video: Mapping[str, ModalitySeries]) -> None:
    some = next(iter(per_video.values()), None)
    d = some.dim if some is not None else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "t_start_s"] + [f"f{i}" for i in range(d)])
        for vid in sorted(per_video):
            s = per_video[vid]
            for t, row in zip(s.t_start, s.frames):
                w.writerow([vid, fmt(t)] + [fmt(v) for v in row.tolist()])


def read_gold(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``{video_id: (ewe, sd)}`` ordered by window."""
    path = Path(path)
    fh, reader, _ = _open_csv(path, GOLD_HEADER)
    acc: dict[str, list[tuple[float, float, float]]] = defaultdict(list)
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise LoadError(f"{path}:{line}: expected 4 columns, got {len(row)}")
            t = _num(path, line, 2, "t_s", row[1])
            e = _num(path, line, 3, "ewe", row[2])
            s = _num(path, line, 4, "sd", row[3])
            if not -1.0 <= e <= 1.0:
                raise LoadError(f"{path}:{line}:3: column 'ewe': rating {e} outside [-1, 1]")
            acc[row[0]].append((t, e, s))
    out = {}
    for vid, items in acc.items():
        items.sort()
        arr = np.array(items)
        out[vid] = (arr[:, 1].copy(), arr[:, 2].copy())
    return out


def write_gold(path: str | Path, golds: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GOLD_HEADER)
        for vid in sorted(golds):
            ewe, sd = golds[vid]
            for t, (e, s) in enumerate(zip(ewe.tolist(), sd.tolist())):
                w.writerow([vid, fmt(t * WINDOW_S), fmt(e), fmt(s)])


def load_corpus(
    manifest_path: str | Path,
    gold_path: str | Path | None = None,
    dims: Mapping[Modality, int] | None = None,
    periods: Mapping[Modality, float] | None = None,
) -> Corpus:
    """Load manifest + whichever ``features_<modality>.csv`` files sit beside it.

    Records are ordered by ``video_id``.  ``gold_path`` (a ``gold.csv``)
    attaches gold tracks; each must have exactly ``ceil(duration / 0.5)``
    samples.  Native frame periods default to 0.5 s audio, 5 s text and
    1/30 s visual unless overridden by ``periods``.
    """
    periods = {**DEFAULT_PERIODS, **(periods or {})}
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    root = manifest_path.parent
    feats: dict[Modality, dict] = {}
    for m in CANONICAL_ORDER:
        p = root / features_filename(m)
        if p.exists():
            feats[m] = read_features(p, None if dims is None else dims.get(m))
    golds = read_gold(gold_path) if gold_path is not None else {}
    records = []
    for e in entries:
        mods = {}
        for m, table in feats.items():
            if e.video_id in table:
                ts, fr = table[e.video_id]
                if fr.shape[0]:
                    mods[m] = ModalitySeries(m, periods[m], fr, ts)
        gold = None
        if e.video_id in golds:
            gold = golds[e.video_id][0]
            T = n_windows_for(e.duration_s)
            if gold.shape[0] != T:
                raise LoadError(f"{gold_path}: video {e.video_id!r} has {gold.shape[0]} gold samples, expected {T}")
        records.append(VideoRecord(e.video_id, e.target_id, e.duration_s, e.partition, mods, gold, e.gender))
    return Corpus(records)


# ---------------------------------------------------------------------------
# partition balance
# ---------------------------------------------------------------------------


@dataclass
class PartitionStats:
    videos: int
    video_fraction: float
    targets: int
    total_duration_s: float
    mean_duration_s: float
    sd_duration_s: float
    gender_counts: dict[str, int]
    gender_ratios: dict[str, float]
    class_counts: dict[str, int]
    class_ratios: dict[str, float]


@dataclass
class PartitionReport:
    disjoint: bool
    violations: dict[str, list[str]]
    partitions: dict[str, PartitionStats]

    def render(self) -> str:
        lines = [f"target-disjoint: {'yes' if self.disjoint else 'NO'}"]
        for tgt, parts in sorted(self.violations.items()):
            lines.append(f"  violation: target {tgt} appears in {', '.join(parts)}")
        lines.append("partition  videos  frac  targets  total_s  mean_s (sd)  gender  classes")
        for name, s in self.partitions.items():
            g = " ".join(f"{k}={v:.0%}" for k, v in sorted(s.gender_ratios.items())) or "-"
            c = " ".join(f"{k}={s.class_counts[k]}({v:.0%})" for k, v in s.class_ratios.items()) or "-"
            lines.append(
                f"{name:<10} {s.videos:>6} {s.video_fraction:>5.0%} {s.targets:>8} {s.total_duration_s:>8.0f}"
                f" {s.mean_duration_s:>7.0f} ({s.sd_duration_s:.0f})  {g}  {c}"
            )
        return "\n".join(lines)


def check_partitions(entries: Sequence, classes: Mapping[str, str] | None = None) -> PartitionReport:
    """Balance report over records carrying video/target ids, partition, duration, gender.

    ``classes`` maps video_id to a valence class name; when absent the class
    columns are empty.  Never raises on content; violations are reported.
    """
    parts_of_target: dict[str, set[str]] = defaultdict(set)
    for e in entries:
        parts_of_target[e.target_id].add(e.partition)
    violations = {t: sorted(p, key=PARTITIONS.index) for t, p in parts_of_target.items() if len(p) > 1}
    total = len(entries)
    stats = {}
    for name in PARTITIONS:
        sub = [e for e in entries if e.partition == name]
        durs = np.array([e.duration_s for e in sub], dtype=np.float64)
        targets = {e.target_id for e in sub}
        # gender is a property of the target, not the video
        gender_of = {}
        for e in sub:
            gender_of.setdefault(e.target_id, e.gender)
        gc = Counter(g for g in gender_of.values() if g)
        cls = Counter(classes[e.video_id] for e in sub if classes and e.video_id in classes)
        ncls = sum(cls.values())
        stats[name] = PartitionStats(
            videos=len(sub),
            video_fraction=len(sub) / total if total else 0.0,
            targets=len(targets),
            total_duration_s=float(durs.sum()),
            mean_duration_s=float(durs.mean()) if len(sub) else 0.0,
            sd_duration_s=float(durs.std(ddof=1)) if len(sub) > 1 else 0.0,
            gender_counts=dict(sorted(gc.items())),
            gender_ratios={k: v / len(targets) for k, v in sorted(gc.items())},
            class_counts={k: cls.get(k, 0) for k in ("Positive", "Negative", "Mixed")} if ncls else {},
            class_ratios={k: cls.get(k, 0) / ncls for k in ("Positive", "Negative", "Mixed")} if ncls else {},
        )
    return PartitionReport(disjoint=not violations, violations=violations, partitions=stats)
