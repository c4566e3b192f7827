"""Observer filtering, evaluator-weighted gold standard, human benchmark."""

from __future__ import annotations

import csv
import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import RATINGS_HEADER, WINDOW_S, LoadError, _num, _open_csv, fmt
from .metrics import ccc, pearson_with_flag

log = logging.getLogger(__name__)

CLASS_CUTOFF = 0.2


class ValenceClass(enum.Enum):
    POSITIVE = "Positive"
    MIXED = "Mixed"
    NEGATIVE = "Negative"


@dataclass(frozen=True)
class RatingTrack:
    observer_id: str
    video_id: str
    samples: np.ndarray
    checks_correct: int = 2
    made_changes: bool = True


@dataclass(frozen=True)
class Exclusion:
    observer_id: str
    video_id: str
    reason: str


@dataclass(frozen=True)
class GoldStandard:
    video_id: str
    ewe: np.ndarray
    sd: np.ndarray
    weights: dict[str, float] = field(default_factory=dict)


def filter_observers(tracks: Iterable[RatingTrack]) -> tuple[list[RatingTrack], list[Exclusion]]:
    """Keep observers who passed both comprehension checks and moved the slider."""
    kept, excluded = [], []
    for tr in tracks:
        if tr.checks_correct != 2:
            excluded.append(Exclusion(tr.observer_id, tr.video_id, "attention"))
        elif not tr.made_changes:
            excluded.append(Exclusion(tr.observer_id, tr.video_id, "flat rating"))
        else:
            kept.append(tr)
    return kept, excluded


def ewe_weights(samples: np.ndarray) -> np.ndarray:
    """Correlation of each row with the unweighted mean row, clamped at 0.

    A single observer gets weight 1; degenerate (constant) tracks get 0.
    """
    n = samples.shape[0]
    if n == 1:
        return np.ones(1)
    mean = samples.mean(axis=0)
    w = np.empty(n)
    for j in range(n):
        r, degenerate = pearson_with_flag(samples[j], mean)
        w[j] = 0.0 if degenerate else max(r, 0.0)
    return w


def ewe(tracks: Sequence[RatingTrack]) -> GoldStandard:
    if len(tracks) == 0:
        raise ValueError("ewe needs at least one rating track")
    vids = {t.video_id for t in tracks}
    if len(vids) != 1:
        raise ValueError(f"ewe expects tracks of one video, got {sorted(vids)}")
    # fixed order so that the weighted sum is independent of input order
    tracks = sorted(tracks, key=lambda t: t.observer_id)
    samples = np.stack([np.asarray(t.samples, dtype=np.float64) for t in tracks])
    w = ewe_weights(samples)
    total = w.sum()
    # averaging deviations from one reference row keeps identical tracks exact
    ref = samples[0]
    dev = samples - ref
    if total > 0.0:
        gold = ref + (w @ dev) / total
    else:
        gold = ref + dev.mean(axis=0)
    sd = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros(samples.shape[1])
    return GoldStandard(
        video_id=tracks[0].video_id,
        ewe=gold,
        sd=sd,
        weights={t.observer_id: float(x) for t, x in zip(tracks, w)},
    )


@dataclass
class HumanBenchmark:
    per_video: dict[str, float]
    per_observer: dict[str, dict[str, float]]
    skipped: list[str]


def leave_one_out_benchmark(tracks_by_video: Mapping[str, Sequence[RatingTrack]], min_observers: int = 3) -> HumanBenchmark:
    """Mean over observers of CCC(observer, EWE of everyone else), per video."""
    per_video, per_obs, skipped = {}, {}, []
    for vid in sorted(tracks_by_video):
        tracks = sorted(tracks_by_video[vid], key=lambda t: t.observer_id)
        if len(tracks) < min_observers:
            log.info("video %s skipped: %d observers (< %d)", vid, len(tracks), min_observers)
            skipped.append(vid)
            continue
        scores = {}
        for j, tr in enumerate(tracks):
            rest = tracks[:j] + tracks[j + 1 :]
            scores[tr.observer_id] = ccc(tr.samples, ewe(rest).ewe)
        per_obs[vid] = scores
        per_video[vid] = float(np.mean(list(scores.values())))
    return HumanBenchmark(per_video, per_obs, skipped)


def classify_video(gold) -> ValenceClass:
    g = np.asarray(gold, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty gold track")
    m = float(g.mean())
    if m > CLASS_CUTOFF:
        return ValenceClass.POSITIVE
    if m < -CLASS_CUTOFF:
        return ValenceClass.NEGATIVE
    return ValenceClass.MIXED


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def read_ratings(path: str | Path, lengths: Mapping[str, int] | None = None) -> dict[str, list[RatingTrack]]:
    """Parse ``ratings.csv`` into per-video rating tracks.

    When ``lengths`` (video_id -> T) is given every track must cover all T
    windows exactly once.
    """
    path = Path(path)
    fh, reader, _ = _open_csv(path, RATINGS_HEADER)
    samples: dict[tuple[str, str], dict[int, float]] = defaultdict(dict)
    meta: dict[tuple[str, str], tuple[int, int, int]] = {}
    with fh:
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise LoadError(f"{path}:{line}: expected 6 columns, got {len(row)}")
            vid, obs = row[0], row[1]
            t = _num(path, line, 3, "t_s", row[2])
            r = _num(path, line, 4, "rating", row[3])
            cc = _num(path, line, 5, "checks_correct", row[4], int)
            mc = _num(path, line, 6, "made_changes", row[5], int)
            if not -1.0 <= r <= 1.0:
                raise LoadError(f"{path}:{line}:4: column 'rating': {r} outside [-1, 1]")
            if cc not in (0, 1, 2):
                raise LoadError(f"{path}:{line}:5: column 'checks_correct': must be 0, 1 or 2")
            if mc not in (0, 1):
                raise LoadError(f"{path}:{line}:6: column 'made_changes': must be 0 or 1")
            k = t / WINDOW_S
            idx = int(round(k))
            if abs(k - idx) > 1e-6 or idx < 0:
                raise LoadError(f"{path}:{line}:3: column 't_s': {t} is not on the 0.5 s grid")
            key = (vid, obs)
            if key in meta and meta[key][:2] != (cc, mc):
                raise LoadError(f"{path}:{line}: inconsistent check/change flags for observer {obs}")
            meta.setdefault(key, (cc, mc, line))
            if idx in samples[key]:
                raise LoadError(f"{path}:{line}:3: duplicate sample at t_s={t} for observer {obs}")
            samples[key][idx] = r
    out: dict[str, list[RatingTrack]] = defaultdict(list)
    for key in sorted(samples):
        vid, obs = key
        d = samples[key]
        n = max(d) + 1 if lengths is None or vid not in lengths else lengths[vid]
        if sorted(d) != list(range(n)):
            raise LoadError(f"{path}:{meta[key][2]}: observer {obs} on video {vid} does not cover windows 0..{n - 1}")
        arr = np.array([d[i] for i in range(n)])
        cc, mc, _ = meta[key]
        out[vid].append(RatingTrack(obs, vid, arr, cc, bool(mc)))
    return dict(out)


def write_ratings(path: str | Path, tracks: Iterable[RatingTrack]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATINGS_HEADER)
        for tr in sorted(tracks, key=lambda t: (t.video_id, t.observer_id)):
            cc, mc = str(tr.checks_correct), "1" if tr.made_changes else "0"
            for t, r in enumerate(np.asarray(tr.samples).tolist()):
                w.writerow([tr.video_id, tr.observer_id, fmt(t * WINDOW_S), fmt(r), cc, mc])


def write_exclusions(path: str | Path, exclusions: Iterable[Exclusion]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observer_id", "video_id", "reason"])
        for e in sorted(exclusions, key=lambda e: (e.video_id, e.observer_id)):
            w.writerow([e.observer_id, e.video_id, e.reason])
