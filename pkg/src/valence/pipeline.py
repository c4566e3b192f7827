"""Glue between aggregation, the corpus and the models."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import aggregation as agg
from .data import Corpus, FusedSequence, Modality, VideoRecord

log = logging.getLogger(__name__)


def gold_from_ratings(tracks: Iterable[agg.RatingTrack]):
    """Filter observers then EWE per video.

    Returns ``(golds, exclusions, kept_by_video, insufficient)`` where
    ``golds`` maps video_id to a :class:`GoldStandard` and ``insufficient``
    lists videos with no observer left after filtering.
    """
    kept, excluded = agg.filter_observers(tracks)
    by_video: dict[str, list[agg.RatingTrack]] = {}
    for tr in kept:
        by_video.setdefault(tr.video_id, []).append(tr)
    all_videos = {tr.video_id for tr in tracks} if isinstance(tracks, Sequence) else set(by_video)
    for e in excluded:
        all_videos.add(e.video_id)
    golds = {vid: agg.ewe(by_video[vid]) for vid in sorted(by_video)}
    insufficient = sorted(all_videos - set(by_video))
    return golds, excluded, by_video, insufficient


def attach_gold(corpus: Corpus, golds: Mapping[str, np.ndarray]) -> Corpus:
    """Records with gold tracks set from ``golds`` (video_id -> length-T array)."""
    out = []
    for r in corpus.records:
        g = golds.get(r.video_id)
        if g is not None:
            g = np.asarray(g, dtype=np.float64)
            if g.shape[0] != r.T:
                raise ValueError(f"video {r.video_id}: gold has {g.shape[0]} samples, expected {r.T}")
        out.append(replace(r, gold=g))
    return Corpus(out)


def sequences(records: Sequence[VideoRecord], mods: Sequence[Modality], dims=None) -> list[tuple[FusedSequence, np.ndarray]]:
    """(features, gold) pairs; records without gold are skipped with a log line."""
    out = []
    for r in records:
        if r.gold is None:
            log.warning("video %s has no gold track; skipped", r.video_id)
            continue
        out.append((r.fused(mods, dims), r.gold))
    return out
