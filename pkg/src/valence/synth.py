"""Desk-scale synthetic stand-in for a multimodal narrative-valence corpus.

Each video gets a latent valence track built from a few logistic ramps
(rising, falling or mixed narrative arcs).  Features are noisy linear
read-outs of the latent track at each modality's native rate; text is the
strongest channel but has silent stretches with no words.  Observers
follow the latent track with a short reaction delay, a gain below one and
smooth rating noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .data import (
    CANONICAL_ORDER,
    DEFAULT_DIMS,
    DEFAULT_PERIODS,
    PARTITIONS,
    WINDOW_S,
    Corpus,
    ManifestEntry,
    Modality,
    ModalitySeries,
    VideoRecord,
    features_filename,
    fmt,
    write_features,
    write_manifest,
)

MIN_T = 10


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    targets: tuple[int, int, int] = (12, 4, 4)
    videos_per_target: int = 5
    T: int = 200
    ramps: tuple[int, int] = (2, 4)
    ramp_width: tuple[float, float] = (4.0, 25.0)
    valence_noise: float = 0.05
    # per-dimension noise of the native-rate feature frames (signal loadings have unit norm)
    text_noise: float = 0.2
    audio_noise: float = 2.0
    visual_noise: float = 10.0
    text_gap_prob: float = 0.35
    # mean length, in text frames, of a silent stretch
    text_gap_len: float = 3.0
    observers: tuple[int, int] = (15, 25)
    delay: tuple[int, int] = (1, 3)
    gain: tuple[float, float] = (0.7, 1.0)
    observer_noise: float = 0.08
    p_attention_fail: float = 0.08
    p_flat: float = 0.03
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))

    def zero_noise(self) -> "SynthConfig":
        return replace(self, valence_noise=0.0, text_noise=0.0, audio_noise=0.0, visual_noise=0.0,
                       text_gap_prob=0.0, observer_noise=0.0, p_attention_fail=0.0, p_flat=0.0)


@dataclass
class SynthCorpus:
    corpus: Corpus
    latent: dict[str, np.ndarray]
    ratings: list[agg.RatingTrack]
    config: SynthConfig


def _smooth_noise(rng, T, sd, width=6.0):
    if sd == 0.0:
        return np.zeros(T)
    k = np.exp(-0.5 * (np.arange(-3 * int(width), 3 * int(width) + 1) / width) ** 2)
    k /= np.sqrt((k * k).sum())
    raw = rng.standard_normal(T + k.size - 1)
    return sd * np.convolve(raw, k, mode="valid")


def latent_valence(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    T = cfg.T
    t = np.arange(T, dtype=np.float64)
    n = int(rng.integers(cfg.ramps[0], cfg.ramps[1] + 1))
    v = np.full(T, rng.uniform(-0.5, 0.5))
    for _ in range(n):
        amp = rng.uniform(-1.0, 1.0)
        centre = rng.uniform(0.1 * T, 0.9 * T)
        width = rng.uniform(*cfg.ramp_width)
        v += amp * (1.0 / (1.0 + np.exp(-(t - centre) / width)) - 0.5)
    v += _smooth_noise(rng, T, cfg.valence_noise)
    return np.clip(v, -1.0, 1.0)


def _loading(rng, d):
    w = rng.standard_normal(d)
    return w / np.linalg.norm(w)


def _window_value(v: np.ndarray, t_start: np.ndarray, period: float) -> np.ndarray:
    """Latent valence averaged over each native frame's span (windows it covers)."""
    T = v.shape[0]
    out = np.empty(t_start.shape[0])
    for i, s in enumerate(t_start):
        lo = int(np.floor(s / WINDOW_S + 1e-9))
        hi = max(lo + 1, int(np.ceil((s + period) / WINDOW_S - 1e-9)))
        out[i] = v[min(lo, T - 1) : min(hi, T)].mean() if lo < T else v[-1]
    return out


def _features(rng, m: Modality, v, load, cfg: SynthConfig) -> ModalitySeries:
    period = DEFAULT_PERIODS[m]
    duration = cfg.T * WINDOW_S
    n = int(np.ceil(duration / period - 1e-9))
    t_start = np.round(np.arange(n) * period, 9)
    sig = _window_value(v, t_start, period)
    noise = {Modality.AUDIO: cfg.audio_noise, Modality.TEXT: cfg.text_noise, Modality.VISUAL: cfg.visual_noise}[m]
    frames = np.outer(sig, load) + noise * rng.standard_normal((n, load.shape[0]))
    if m is Modality.TEXT and cfg.text_gap_prob > 0:
        keep = _speech_mask(rng, n, cfg.text_gap_prob, cfg.text_gap_len)
        frames, t_start = frames[keep], t_start[keep]
    return ModalitySeries(m, period, frames, t_start)


def _speech_mask(rng, n, gap_prob, gap_len):
    # two-state Markov chain: silent stretches last gap_len frames on average
    # and cover a gap_prob fraction of frames; the first frame is spoken
    leave = 1.0 / max(gap_len, 1.0)
    enter = min(1.0, leave * gap_prob / (1.0 - gap_prob))
    u = rng.random(n)
    keep = np.empty(n, dtype=bool)
    keep[0] = True
    for i in range(1, n):
        keep[i] = u[i] >= enter if keep[i - 1] else u[i] < leave
    return keep


def _observer(rng, vid, j, v, cfg: SynthConfig) -> agg.RatingTrack:
    d = int(rng.integers(cfg.delay[0], cfg.delay[1] + 1))
    gain = rng.uniform(*cfg.gain)
    delayed = np.concatenate([np.full(d, v[0]), v[:-d]]) if d else v.copy()
    track = np.clip(gain * delayed + _smooth_noise(rng, v.shape[0], cfg.observer_noise, 3.0), -1.0, 1.0)
    u = rng.random()
    checks = 2
    if u < cfg.p_attention_fail:
        checks = 1 if u < 0.85 * cfg.p_attention_fail else 0
    made_changes = True
    if rng.random() < cfg.p_flat:
        made_changes = False
        track = np.zeros_like(track)
    return agg.RatingTrack(f"o{j:03d}", vid, track, checks, made_changes)


def generate(cfg: SynthConfig | None = None) -> SynthCorpus:
    """Deterministic corpus for ``cfg.seed``: features, latent valence, observer ratings."""
    cfg = cfg or SynthConfig()
    if cfg.T < MIN_T:
        raise ValueError(f"T must be at least {MIN_T} windows, got {cfg.T}")
    if min(cfg.targets) < 1 or cfg.videos_per_target < 1:
        raise ValueError("target and video counts must be positive")
    root = np.random.SeedSequence(cfg.seed)
    load_ss, video_ss = root.spawn(2)
    lrng = np.random.default_rng(load_ss)
    loads = {m: _loading(lrng, cfg.dims[m]) for m in CANONICAL_ORDER}
    n_videos = sum(cfg.targets) * cfg.videos_per_target
    streams = iter(video_ss.spawn(n_videos))
    records, latent, ratings = [], {}, []
    k = 0
    for part, n_targets in zip(PARTITIONS, cfg.targets):
        for _ in range(n_targets):
            tid = f"tgt{k // cfg.videos_per_target:03d}"
            gender = "F" if (k // cfg.videos_per_target) % 5 in (0, 2, 4) else "M"
            for _ in range(cfg.videos_per_target):
                vid = f"vid{k:04d}"
                rng = np.random.default_rng(next(streams))
                v = latent_valence(rng, cfg)
                mods = {m: _features(rng, m, v, loads[m], cfg) for m in CANONICAL_ORDER}
                n_obs = int(rng.integers(cfg.observers[0], cfg.observers[1] + 1))
                ratings.extend(_observer(rng, vid, j, v, cfg) for j in range(n_obs))
                records.append(VideoRecord(vid, tid, cfg.T * WINDOW_S, part, mods, None, gender))
                latent[vid] = v
                k += 1
    return SynthCorpus(Corpus(records), latent, ratings, cfg)


def write(sc: SynthCorpus, out_dir: str | Path) -> dict[str, Path]:
    """Emit manifest, per-modality features, ratings and the latent track."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = sc.corpus.records
    write_manifest(out / "manifest.csv", [ManifestEntry(r.video_id, r.target_id, r.partition, r.duration_s, r.gender) for r in recs])
    paths = {"manifest": out / "manifest.csv"}
    for m in CANONICAL_ORDER:
        p = out / features_filename(m)
        write_features(p, {r.video_id: r.modalities[m] for r in recs if m in r.modalities})
        paths[m.value] = p
    agg.write_ratings(out / "ratings.csv", sc.ratings)
    paths["ratings"] = out / "ratings.csv"
    with (out / "gold_latent.csv").open("w", encoding="utf-8") as fh:
        fh.write("video_id,t_s,valence\n")
        for vid in sorted(sc.latent):
            for t, x in enumerate(sc.latent[vid].tolist()):
                fh.write(f"{vid},{fmt(t * WINDOW_S)},{fmt(x)}\n")
    paths["latent"] = out / "gold_latent.csv"
    return paths
