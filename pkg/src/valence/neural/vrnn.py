"""Multimodal variational RNN with product-of-Gaussians inference.

Per window, the latent z_t has a prior from the previous hidden state and
one Gaussian expert per observed modality (plus one for the rating during
training).  Experts are fused by multiplying densities.  Decoders rebuild
every modality and the rating from (z_t, h_{t-1}); the next hidden state is
an MLP of z_t, the inputs and the rating, with reconstructions standing in
for whatever was not observed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import DiagGaussian, Tape, Tensor
from ..data import FusedSequence, Modality
from .common import Batch, FitConfig, LogRow, Scaler, fit, glorot, make_batch

LOGVAR_BOUND = 5.0


@dataclass(frozen=True)
class VrnnConfig:
    hidden: int = 64
    latent: int = 32
    mlp_hidden: int = 64
    alpha_final: float = 10.0
    beta_final: float = 1.0
    anneal_epochs: int = 10
    lambda0: float = 1.0
    # chance per window that training hides the rating, as at eval time
    rating_dropout: float = 0.5
    seed: int = 0
    # early stopping waits until the rating and KL weights have reached their final values
    fit: FitConfig = field(default_factory=lambda: FitConfig(min_epochs=20))

    def __post_init__(self):
        if not 0.0 <= self.rating_dropout <= 1.0:
            raise ValueError("rating dropout must lie in [0, 1]")

    def weights(self, epoch: int) -> tuple[float, float]:
        """(alpha, beta) for ``epoch``: linear ramps from 0 over the first K epochs."""
        ramp = 1.0 if self.anneal_epochs <= 0 else min(1.0, epoch / self.anneal_epochs)
        return self.alpha_final * ramp, self.beta_final * ramp


@dataclass(frozen=True)
class VrnnModel:
    config: VrnnConfig
    modalities: tuple[Modality, ...]
    dims: tuple[int, ...]
    params: dict[str, np.ndarray]
    scaler: Scaler

    @property
    def n_features(self) -> int:
        return int(sum(self.dims))


def _head(rng, prefix, inputs: dict[str, int], hidden: int, out: int) -> dict[str, np.ndarray]:
    p = {f"{prefix}.W_{k}": glorot(rng, d, hidden) for k, d in inputs.items()}
    p[f"{prefix}.b1"] = np.zeros(hidden)
    p[f"{prefix}.W2"] = glorot(rng, hidden, out)
    p[f"{prefix}.b2"] = np.zeros(out)
    return p


def init_params(rng: np.random.Generator, modalities, dims, cfg: VrnnConfig) -> dict[str, np.ndarray]:
    H, L, K = cfg.hidden, cfg.latent, cfg.mlp_hidden
    p = _head(rng, "prior", {"h": H}, K, 2 * L)
    for m, d in zip(modalities, dims):
        p.update(_head(rng, f"enc.{m.letter}", {"x": d, "h": H}, K, 2 * L))
    p.update(_head(rng, "enc.Y", {"x": 1, "h": H}, K, 2 * L))
    for m, d in zip(modalities, dims):
        p.update(_head(rng, f"dec.{m.letter}", {"z": L, "h": H}, K, 2 * d))
    p.update(_head(rng, "dec.Y", {"z": L, "h": H}, K, 2))
    rec_in = {"z": L, "Y": 1, **{m.letter: d for m, d in zip(modalities, dims)}}
    p.update(_head(rng, "rec", rec_in, K, H))
    return p


def _mlp(p: dict[str, Tensor], prefix: str, inputs: dict[str, Tensor]) -> Tensor:
    pre = p[f"{prefix}.b1"]
    for k, x in inputs.items():
        pre = pre + x @ p[f"{prefix}.W_{k}"]
    return ad.linear(ad.tanh(pre), p[f"{prefix}.W2"], p[f"{prefix}.b2"])


def _gaussian(out: Tensor) -> DiagGaussian:
    # log-variances pass through a soft clamp so no head can collapse to a spike
    d = out.shape[-1] // 2
    return DiagGaussian(out[..., :d], ad.mul(ad.tanh(ad.mul(out[..., d:], 1.0 / LOGVAR_BOUND)), LOGVAR_BOUND))


def vrnn_prior(p: dict[str, Tensor], h_prev: Tensor) -> DiagGaussian:
    return _gaussian(_mlp(p, "prior", {"h": h_prev}))


def vrnn_modality_posterior(p: dict[str, Tensor], m: Modality, x_m: Tensor, h_prev: Tensor) -> DiagGaussian:
    return _gaussian(_mlp(p, f"enc.{m.letter}", {"x": x_m, "h": h_prev}))


def vrnn_rating_posterior(p: dict[str, Tensor], y: Tensor, h_prev: Tensor) -> DiagGaussian:
    return _gaussian(_mlp(p, "enc.Y", {"x": y, "h": h_prev}))


def poe_fuse(prior: DiagGaussian, posteriors=(), masks=None) -> DiagGaussian:
    """Prior times the available experts; ``masks[i]`` (B, 1) gates expert i per row."""
    factors = [prior, *posteriors]
    if masks is None:
        return ad.poe(factors)
    return ad.poe(factors, [None, *masks])


@dataclass
class StepOutput:
    z: Tensor
    posterior: DiagGaussian
    prior: DiagGaussian
    x_recon: dict[Modality, DiagGaussian]
    y_recon: DiagGaussian
    h: Tensor
    nll_x: dict[Modality, Tensor]  # (B,) per modality, zero where unobserved
    nll_y: Tensor | None  # (B,)
    kl: Tensor  # (B,)


def vrnn_step(
    tape: Tape,
    p: dict[str, Tensor],
    h_prev: Tensor,
    x_t: dict[Modality, tuple[Tensor, np.ndarray]],
    y_t: Tensor | None = None,
    noise: np.ndarray | None = None,
    y_mask: np.ndarray | None = None,
) -> StepOutput:
    """One window.  ``x_t[m] = (x, observed)`` with ``observed`` of shape (B,).

    With ``y_t`` given (training) the rating expert joins the fusion and the
    true rating feeds the recurrence; otherwise, or where ``y_mask`` is
    false, the rating reconstruction does.  ``noise`` None means eval: z is
    the fused posterior mean.
    """
    prior = vrnn_prior(p, h_prev)
    experts, gates = [], []
    for m, (x, obs) in x_t.items():
        experts.append(vrnn_modality_posterior(p, m, x, h_prev))
        gates.append(np.asarray(obs, dtype=np.float64)[:, None])
    if y_t is not None:
        y_gate = np.ones((h_prev.shape[0], 1)) if y_mask is None else np.asarray(y_mask, dtype=np.float64)[:, None]
        experts.append(vrnn_rating_posterior(p, y_t, h_prev))
        gates.append(y_gate)
    q = poe_fuse(prior, experts, gates)
    z = q.mean if noise is None else ad.reparam_sample(q, noise)
    x_recon, nll_x, rec_in = {}, {}, {"z": z}
    for m, (x, obs) in x_t.items():
        dist = _gaussian(_mlp(p, f"dec.{m.letter}", {"z": z, "h": h_prev}))
        x_recon[m] = dist
        o = np.asarray(obs, dtype=np.float64)
        nll_x[m] = ad.apply_mask(ad.gaussian_nll(x, dist, reduce=False), o)
        # observed inputs where present, reconstruction means where missing
        rec_in[m.letter] = ad.apply_mask(x, o[:, None]) + ad.apply_mask(dist.mean, 1.0 - o[:, None])
    y_recon = _gaussian(_mlp(p, "dec.Y", {"z": z, "h": h_prev}))
    nll_y = None
    if y_t is not None:
        nll_y = ad.gaussian_nll(y_t, y_recon, reduce=False)
        rec_in["Y"] = ad.apply_mask(y_t, y_gate) + ad.apply_mask(y_recon.mean, 1.0 - y_gate)
    else:
        rec_in["Y"] = y_recon.mean
    h = ad.tanh(_mlp(p, "rec", rec_in))
    kl = ad.gaussian_kl(q, prior, reduce=False)
    return StepOutput(z, q, prior, x_recon, y_recon, h, nll_x, nll_y, kl)


def _split(batch: Batch, modalities, dims):
    bounds = np.cumsum((0,) + tuple(dims))
    return {m: (int(bounds[i]), int(bounds[i + 1]), i) for i, m in enumerate(modalities)}


def vrnn_loss(
    tape: Tape,
    p: dict[str, Tensor],
    batch: Batch,
    modalities,
    dims,
    cfg: VrnnConfig,
    alpha: float,
    beta: float,
    noise: np.ndarray,
    y_input: np.ndarray | None = None,
    y_shown: np.ndarray | None = None,
) -> Tensor:
    """Negative weighted ELBO, per-window mean per video, averaged over the batch.

    ``noise`` has shape (B, T, L).  ``y_input`` overrides the rating fed to the
    rating expert and the recurrence (defaults to the gold track).
    ``y_shown`` (B, T) marks windows whose rating is visible to the model;
    hidden ratings are still scored by the rating likelihood.
    """
    B, T = batch.size, batch.T
    H = cfg.hidden
    spans = _split(batch, modalities, dims)
    lam = {m: cfg.lambda0 / d for m, d in zip(modalities, dims)}
    w = batch.valid / (batch.lengths[:, None] * B)  # (B, T)
    y_src = batch.gold if y_input is None else y_input
    X = tape.const(batch.features)
    Y = tape.const(y_src[..., None])
    h = tape.const(np.zeros((B, H)))
    total = None
    for t in range(T):
        x_t = {m: (X[:, t, lo:hi], batch.mask[:, t, i] & batch.valid[:, t]) for m, (lo, hi, i) in spans.items()}
        shown = batch.valid[:, t] if y_shown is None else batch.valid[:, t] & y_shown[:, t]
        s = vrnn_step(tape, p, h, x_t, Y[:, t], noise[:, t], y_mask=shown)
        per_row = ad.mul(s.kl, beta)
        if alpha != 0.0:
            per_row = per_row + ad.mul(s.nll_y, alpha)
        for m in modalities:
            per_row = per_row + ad.mul(s.nll_x[m], lam[m])
        term = ad.tsum(ad.apply_mask(per_row, w[:, t]))
        total = term if total is None else total + term
        h = s.h
    return total


def predict_params(params, modalities, dims, hidden: int, seqs: list[FusedSequence], chunk: int = 32) -> list[np.ndarray]:
    """Eval protocol: no rating expert, posterior-mean z, rating mean fed back, clipped."""
    out = []
    for start in range(0, len(seqs), chunk):
        part = seqs[start : start + chunk]
        batch = make_batch(part)
        spans = _split(batch, modalities, dims)
        h = np.zeros((batch.size, hidden))
        ys = np.zeros((batch.size, batch.T))
        for t in range(batch.T):
            # nothing to differentiate, so a fresh tape per window keeps memory flat
            tape = Tape()
            p = {k: tape.const(v) for k, v in params.items()}
            x_t = {
                m: (tape.const(batch.features[:, t, lo:hi]), batch.mask[:, t, i] & batch.valid[:, t])
                for m, (lo, hi, i) in spans.items()
            }
            s = vrnn_step(tape, p, tape.const(h), x_t)
            ys[:, t] = s.y_recon.mean.value[:, 0]
            h = s.h.value
        out.extend(np.clip(ys[b, : sq.T], -1.0, 1.0) for b, sq in enumerate(part))
    return out


def _check_input(model_dims, modalities, seq: FusedSequence):
    if seq.modalities != modalities or seq.dims != model_dims:
        got = "".join(m.letter for m in seq.modalities)
        want = "".join(m.letter for m in modalities)
        raise ValueError(f"model expects modalities {want} with dims {model_dims}, got {got} with {seq.dims}")


def predict_vrnn(model: VrnnModel, seqs) -> list[np.ndarray]:
    seqs = [seqs] if isinstance(seqs, FusedSequence) else list(seqs)
    for s in seqs:
        _check_input(model.dims, model.modalities, s)
    scaled = [model.scaler.transform(s) for s in seqs]
    return predict_params(model.params, model.modalities, model.dims, model.config.hidden, scaled)


def train_vrnn(train, val, config: VrnnConfig | None = None) -> tuple[VrnnModel, list[LogRow]]:
    """Fit with annealed rating/KL weights; select the epoch by Validation CCC."""
    cfg = config or VrnnConfig()
    if not train or not val:
        raise ValueError("train_vrnn needs non-empty Train and Validation sets")
    first = train[0][0]
    for s, _ in list(train) + list(val):
        _check_input(first.dims, first.modalities, s)
    mods, dims = first.modalities, first.dims
    scaler = Scaler.fit([s for s, _ in train])
    tr = ([scaler.transform(s) for s, _ in train], [np.asarray(g, dtype=np.float64) for _, g in train])
    va = ([scaler.transform(s) for s, _ in val], [np.asarray(g, dtype=np.float64) for _, g in val])
    init_ss, noise_ss, shuf_ss, hide_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    params = init_params(np.random.default_rng(init_ss), mods, dims, cfg)
    noise_rng, hide_rng = np.random.default_rng(noise_ss), np.random.default_rng(hide_ss)

    def batch_loss(tape, p, batch, epoch):
        alpha, beta = cfg.weights(epoch)
        noise = noise_rng.standard_normal((batch.size, batch.T, cfg.latent))
        shown = hide_rng.random((batch.size, batch.T)) >= cfg.rating_dropout
        return vrnn_loss(tape, p, batch, mods, dims, cfg, alpha, beta, noise, y_shown=shown)

    def predict(ps, seqs):
        return predict_params(ps, mods, dims, cfg.hidden, seqs)

    best, rows, _ = fit(params, tr, va, batch_loss, predict, cfg.fit, np.random.default_rng(shuf_ss))
    return VrnnModel(cfg, mods, dims, best, scaler), rows
