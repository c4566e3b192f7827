"""Encoder-decoder LSTM with local attention over the last few encoder states.

The encoder reads the (dropout-masked) fused features.  At each step an MLP
of the current input scores the ``window`` most recent encoder states; the
softmax-weighted sum is the context fed, with the previous rating, to a
decoder LSTM whose hidden state is projected to a scalar valence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Tensor
from ..data import FusedSequence, Modality
from .common import Batch, FitConfig, LogRow, Scaler, fit, glorot, make_batch

MASK_SCORE = -1e30


@dataclass(frozen=True)
class LstmConfig:
    hidden: int = 64
    att_hidden: int = 32
    window: int = 3
    dropout: float = 0.1
    teacher_forcing: float = 0.5
    # scale applied to the Glorot init of the input-facing weights
    input_init_scale: float = 1.0
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("attention window must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ValueError("teacher forcing ratio must lie in [0, 1]")


@dataclass(frozen=True)
class LstmModel:
    config: LstmConfig
    modalities: tuple[Modality, ...]
    dims: tuple[int, ...]
    params: dict[str, np.ndarray]
    scaler: Scaler

    @property
    def n_features(self) -> int:
        return int(sum(self.dims))


def init_params(rng: np.random.Generator, n_features: int, cfg: LstmConfig) -> dict[str, np.ndarray]:
    H, A, F = cfg.hidden, cfg.att_hidden, n_features
    bias = np.zeros(4 * H)
    bias[H : 2 * H] = 1.0  # forget gate starts open
    return {
        "enc.Wx": cfg.input_init_scale * glorot(rng, F, 4 * H),
        "enc.Wh": glorot(rng, H, 4 * H),
        "enc.b": bias.copy(),
        "att.W1": cfg.input_init_scale * glorot(rng, F, A),
        "att.b1": np.zeros(A),
        "att.W2": glorot(rng, A, cfg.window),
        "att.b2": np.zeros(cfg.window),
        "dec.Wc": glorot(rng, H, 4 * H),
        "dec.wy": glorot(rng, 1, 4 * H),
        "dec.Wh": glorot(rng, H, 4 * H),
        "dec.b": bias.copy(),
        "out.w": glorot(rng, H, 1),
        "out.b": np.zeros(1),
    }


def _gate_update(z: Tensor, c_prev: Tensor, H: int) -> tuple[Tensor, Tensor]:
    # gate order in the stacked pre-activation: input, forget, candidate, output
    i = ad.sigmoid(z[..., :H])
    f = ad.sigmoid(z[..., H : 2 * H])
    g = ad.tanh(z[..., 2 * H : 3 * H])
    o = ad.sigmoid(z[..., 3 * H :])
    c = f * c_prev + i * g
    return o * ad.tanh(c), c


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One standard forget-gate LSTM step; returns ``(h, c)``."""
    H = Wh.shape[0]
    if Wx.shape[1] != 4 * H or Wh.shape[1] != 4 * H or x.shape[-1] != Wx.shape[0]:
        raise ad.DimensionError(f"lstm_cell: x {x.shape}, Wx {Wx.shape}, Wh {Wh.shape}")
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ad.DimensionError(f"lstm_cell: state shapes {h_prev.shape}, {c_prev.shape} vs hidden {H}")
    z = ad.linear(x, Wx, b) + h_prev @ Wh
    return _gate_update(z, c_prev, H)


def encode(tape: Tape, p: dict[str, Tensor], X: Tensor) -> list[Tensor]:
    """Encoder states h_1..h_T for a (B, T, F) input, starting from zero state."""
    B, T = X.shape[0], X.shape[1]
    H = p["enc.Wh"].shape[0]
    zx = ad.linear(X, p["enc.Wx"], p["enc.b"])  # all input projections at once
    h = c = tape.const(np.zeros((B, H)))
    hs = []
    for t in range(T):
        h, c = _gate_update(zx[:, t] + h @ p["enc.Wh"], c, H)
        hs.append(h)
    return hs


def attention_scores(p: dict[str, Tensor], X: Tensor) -> Tensor:
    return ad.linear(ad.tanh(ad.linear(X, p["att.W1"], p["att.b1"])), p["att.W2"], p["att.b2"])


def local_attention(tape: Tape, p: dict[str, Tensor], X: Tensor, hs: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Context c_t = sum_j a_{t,j} h_{t-j} over the last ``window`` states.

    Score j of step t weights h_{t-j}; for early steps the window is cut to
    the states that exist.  Returns contexts (B, T, H) and weights (B, T, l).
    """
    T = len(hs)
    lwin = p["att.W2"].shape[1]
    invalid = np.arange(lwin)[None, :] > np.arange(T)[:, None]
    a = ad.softmax(attention_scores(p, X) + np.where(invalid, MASK_SCORE, 0.0))
    zero = tape.const(np.zeros(hs[0].shape))
    ctx = None
    for j in range(min(lwin, T)):
        shifted = ad.stack([zero] * j + hs[: T - j], axis=1)
        term = a[..., j : j + 1] * shifted
        ctx = term if ctx is None else ctx + term
    return ctx, a


def decode(tape: Tape, p: dict[str, Tensor], ctx: Tensor, gold: np.ndarray | None = None, forced: np.ndarray | None = None) -> Tensor:
    """Decoder pass; ``forced[b, t]`` feeds the true Y_t into step t+1.

    With ``forced`` None the decoder always consumes its own previous output
    (the eval protocol).  The first step sees Y_0 = 0.
    """
    B, T = ctx.shape[0], ctx.shape[1]
    H = p["dec.Wh"].shape[0]
    zc = ad.linear(ctx, p["dec.Wc"], p["dec.b"])
    h = c = tape.const(np.zeros((B, H)))
    y_prev = tape.const(np.zeros((B, 1)))
    outs = []
    for t in range(T):
        h, c = _gate_update(zc[:, t] + y_prev * p["dec.wy"] + h @ p["dec.Wh"], c, H)
        y = ad.linear(h, p["out.w"], p["out.b"])
        outs.append(y)
        if forced is None:
            y_prev = y
        else:
            f = forced[:, t : t + 1]
            truth = np.where(f, gold[:, t : t + 1], 0.0)
            if f.all():
                y_prev = tape.const(truth)
            elif not f.any():
                y_prev = y
            else:
                y_prev = ad.apply_mask(y, ~f) + truth
    return ad.concat(outs)


def forward(tape: Tape, p: dict[str, Tensor], batch: Batch, dropout: np.ndarray | None = None, forced: np.ndarray | None = None) -> Tensor:
    X = tape.const(batch.features)
    if dropout is not None:
        X = ad.apply_mask(X, dropout)
    hs = encode(tape, p, X)
    ctx, _ = local_attention(tape, p, X, hs)
    return decode(tape, p, ctx, batch.gold, forced)


def sequence_mse(yhat: Tensor, batch: Batch) -> Tensor:
    """Per-video mean squared error over valid windows, averaged over the batch."""
    w = batch.valid / (batch.lengths[:, None] * batch.size)
    return ad.tsum(ad.apply_mask(ad.square(yhat - batch.gold), w))


def lstm_loss(tape: Tape, p: dict[str, Tensor], batch: Batch, cfg: LstmConfig, drop_rng=None, tf_rng=None) -> Tensor:
    """Training loss; without rngs dropout is off and teacher forcing is total."""
    drop = None
    if drop_rng is not None and cfg.dropout > 0:
        drop = ad.dropout_mask(drop_rng, batch.features.shape, cfg.dropout)
    if tf_rng is None:
        forced = np.ones((batch.size, batch.T), dtype=bool)
    else:
        forced = tf_rng.random((batch.size, batch.T)) < cfg.teacher_forcing
    return sequence_mse(forward(tape, p, batch, drop, forced), batch)


def predict_params(params: dict[str, np.ndarray], seqs: list[FusedSequence], chunk: int = 32) -> list[np.ndarray]:
    """Eval-mode tracks for already-scaled sequences (no dropout, free-running, clipped)."""
    out = []
    for start in range(0, len(seqs), chunk):
        part = seqs[start : start + chunk]
        batch = make_batch(part)
        tape = Tape()
        p = {k: tape.const(v) for k, v in params.items()}
        y = forward(tape, p, batch).value
        out.extend(np.clip(y[b, : s.T], -1.0, 1.0) for b, s in enumerate(part))
    return out


def _check_input(model_dims, modalities, seq: FusedSequence):
    if seq.modalities != modalities or seq.dims != model_dims:
        got = "".join(m.letter for m in seq.modalities)
        want = "".join(m.letter for m in modalities)
        raise ValueError(f"model expects modalities {want} with dims {model_dims}, got {got} with {seq.dims}")


def predict_lstm(model: LstmModel, seqs) -> list[np.ndarray]:
    seqs = [seqs] if isinstance(seqs, FusedSequence) else list(seqs)
    for s in seqs:
        _check_input(model.dims, model.modalities, s)
    return predict_params(model.params, [model.scaler.transform(s) for s in seqs])


def train_lstm(train, val, config: LstmConfig | None = None) -> tuple[LstmModel, list[LogRow]]:
    """Fit on ``train`` and select the epoch by Validation CCC.

    ``train`` and ``val`` are lists of ``(FusedSequence, gold)`` pairs.
    """
    cfg = config or LstmConfig()
    if not train or not val:
        raise ValueError("train_lstm needs non-empty Train and Validation sets")
    first = train[0][0]
    for s, _ in list(train) + list(val):
        _check_input(first.dims, first.modalities, s)
    scaler = Scaler.fit([s for s, _ in train])
    tr = ([scaler.transform(s) for s, _ in train], [np.asarray(g, dtype=np.float64) for _, g in train])
    va = ([scaler.transform(s) for s, _ in val], [np.asarray(g, dtype=np.float64) for _, g in val])
    init_ss, drop_ss, tf_ss, shuf_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    params = init_params(np.random.default_rng(init_ss), first.n_features, cfg)
    drop_rng, tf_rng = np.random.default_rng(drop_ss), np.random.default_rng(tf_ss)

    def batch_loss(tape, p, batch, epoch):
        return lstm_loss(tape, p, batch, cfg, drop_rng, tf_rng)

    best, rows, _ = fit(params, tr, va, batch_loss, predict_params, cfg.fit, np.random.default_rng(shuf_ss))
    return LstmModel(cfg, first.modalities, first.dims, best, scaler), rows
