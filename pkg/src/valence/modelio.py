"""Binary model container.

Layout (all integers little-endian)::

    magic      8 bytes   b"VALMODEL"
    version    uint16
    kind       uint8 length + ASCII tag (svr, hmm, lstm, vrnn)
    header     uint32 length + UTF-8 JSON: metadata and the array table
               (name, shape) in payload order
    payload    every array as raw float64 little-endian, row-major
    checksum   32-byte SHA-256 of everything above

The JSON is written with sorted keys and fixed separators so identical
models give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .baselines.hmm import GaussianMixture, HmmModel
from .baselines.svr import SvrModel
from .data import Modality
from .neural.common import FitConfig, Scaler
from .neural.lstm import LstmConfig, LstmModel
from .neural.vrnn import VrnnConfig, VrnnModel

MAGIC = b"VALMODEL"
VERSION = 1
KINDS = ("svr", "hmm", "lstm", "vrnn")
_CHECKSUM_LEN = 32


class ModelFormatError(ValueError):
    pass


def encode(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    names = sorted(arrays)
    table = [[n, list(np.shape(arrays[n]))] for n in names]
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tag = kind.encode("ascii")
    parts = [MAGIC, struct.pack("<HB", VERSION, len(tag)), tag, struct.pack("<I", len(header)), header]
    for n in names:
        a = np.asarray(arrays[n], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"array {n!r} has non-finite values")
        parts.append(np.ascontiguousarray(a).astype("<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 7 + _CHECKSUM_LEN or blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a model file (bad magic bytes)")
    body, digest = blob[:-_CHECKSUM_LEN], blob[-_CHECKSUM_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError("checksum mismatch: model file is corrupt")
    pos = len(MAGIC)
    version, tag_len = struct.unpack_from("<HB", body, pos)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    pos += 3
    kind = body[pos : pos + tag_len].decode("ascii")
    pos += tag_len
    if kind not in KINDS:
        raise ModelFormatError(f"unknown model kind {kind!r}")
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = json.loads(body[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        end = pos + 8 * n
        if end > len(body):
            raise ModelFormatError("payload shorter than the array table says")
        arrays[name] = np.frombuffer(body[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(body):
        raise ModelFormatError("trailing bytes after the payload")
    return kind, header["meta"], arrays


# ---------------------------------------------------------------------------
# model <-> (meta, arrays)
# ---------------------------------------------------------------------------


def _mods(mods) -> str:
    return "".join(m.letter for m in mods)


def _unmods(text: str) -> tuple[Modality, ...]:
    by_letter = {m.letter: m for m in Modality}
    return tuple(by_letter[c] for c in text)


def _neural_meta(model) -> dict:
    cfg = asdict(model.config)
    return {"modalities": _mods(model.modalities), "dims": list(model.dims), "config": cfg}


def _neural_config(cls, raw: dict):
    raw = dict(raw)
    fit = FitConfig(**raw.pop("fit"))
    return cls(fit=fit, **{f.name: raw[f.name] for f in fields(cls) if f.name in raw and f.name != "fit"})


def kind_of(model) -> str:
    for cls, kind in ((SvrModel, "svr"), (HmmModel, "hmm"), (LstmModel, "lstm"), (VrnnModel, "vrnn")):
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot serialise {type(model).__name__}")


def to_bundle(model, extra: dict | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    kind = kind_of(model)
    if kind == "svr":
        meta = {"epsilon": model.epsilon, "C": model.C}
        arrays = {"weights": model.weights, "bias": np.array([model.bias])}
    elif kind == "hmm":
        meta = {"n_bins": model.n_bins, "n_components": model.emissions[0].n_components, "equal_frequency": model.equal_frequency}
        arrays = {"bin_edges": model.bin_edges, "initial": model.initial, "transition": model.transition}
        for b, g in enumerate(model.emissions):
            arrays[f"emission.{b}.weights"] = g.weights
            arrays[f"emission.{b}.means"] = g.means
            arrays[f"emission.{b}.variances"] = g.variances
    else:
        meta = _neural_meta(model)
        arrays = {f"param.{k}": v for k, v in model.params.items()}
        arrays["scaler.mean"] = model.scaler.mean
        arrays["scaler.scale"] = model.scaler.scale
    if extra:
        meta = {**meta, "run": extra}
    return kind, meta, arrays


def from_bundle(kind: str, meta: dict, arrays: dict[str, np.ndarray]):
    if kind == "svr":
        return SvrModel(arrays["weights"], float(arrays["bias"][0]), float(meta["epsilon"]), float(meta["C"]))
    if kind == "hmm":
        nb = int(meta["n_bins"])
        em = tuple(
            GaussianMixture(arrays[f"emission.{b}.weights"], arrays[f"emission.{b}.means"], arrays[f"emission.{b}.variances"])
            for b in range(nb)
        )
        return HmmModel(nb, arrays["bin_edges"], arrays["initial"], arrays["transition"], em, bool(meta["equal_frequency"]))
    params = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    scaler = Scaler(arrays["scaler.mean"], arrays["scaler.scale"])
    cls, cfg_cls = (LstmModel, LstmConfig) if kind == "lstm" else (VrnnModel, VrnnConfig)
    return cls(_neural_config(cfg_cls, meta["config"]), _unmods(meta["modalities"]), tuple(meta["dims"]), params, scaler)


def save_model(path: str | Path, model, extra: dict | None = None) -> bytes:
    """Write ``model`` and return the bytes written.  ``extra`` lands in meta["run"]."""
    blob = encode(*to_bundle(model, extra))
    Path(path).write_bytes(blob)
    return blob


def load_model(path: str | Path):
    """Returns ``(model, meta)``."""
    p = Path(path)
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"{p}: {exc.strerror or exc}") from exc
    kind, meta, arrays = decode(blob)
    return from_bundle(kind, meta, arrays), meta
