"""Conditional velocity network and its parameter container.

The network is an MLP over ``[x_t, c, emb(t)]`` where ``emb`` is a
sinusoidal time embedding, plus a time-gated linear skip ``g(t) * x_t``.
The skip lets the field extrapolate linearly in x_t outside the region the
training interpolants ever visit. Inputs may be a single vector of length
``data_dim`` or a batch of shape (B, data_dim); ``t`` is a scalar or one
time per row.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    data_dim: int = 2
    hidden_dim: int = 64
    num_layers: int = 2
    time_embed_dim: int = 8
    cond_dropout_prob: float = 0.1
    activation: str = "silu"

    def __post_init__(self):
        for name in ("data_dim", "hidden_dim", "num_layers", "time_embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.cond_dropout_prob <= 1.0:
            raise ValueError("cond_dropout_prob must lie in [0, 1]")
        if self.activation not in ("silu", "tanh"):
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def input_dim(self) -> int:
        return 2 * self.data_dim + 2 * self.time_embed_dim


class ParamSet:
    """Named trainable tensors of one velocity network plus a version tag."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor], version: int = 0):
        self.cfg = cfg
        self.tensors = tensors
        self.version = version
        self.frozen: frozenset[str] = frozenset()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.tensors.items() if k not in self.frozen]

    def clone(self) -> "ParamSet":
        """Independent deep copy (used for the behavior and reference snapshots)."""
        out = ParamSet(
            self.cfg,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
            self.version,
        )
        out.frozen = self.frozen
        return out

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([t.grad.ravel() for t in self.tensors.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self.tensors.values():
            n = t.size
            t.data[...] = vec[i : i + n].reshape(t.shape)
            i += n

    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def equal(self, other: "ParamSet") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v.data, other.tensors[k].data) for k, v in self.tensors.items()
        )


def layer_names(cfg: ModelConfig) -> list[str]:
    return [f"hidden{i}" for i in range(cfg.num_layers)] + ["out", "skip"]


def init_params(cfg: ModelConfig, seed: int, out_scale: float = 1e-2) -> ParamSet:
    """Deterministic init; the output layer is scaled down so v starts near 0."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    fan_in = cfg.input_dim
    for i in range(cfg.num_layers):
        W = rng.standard_normal((fan_in, cfg.hidden_dim)) / np.sqrt(fan_in)
        tensors[f"hidden{i}.W"] = Tensor(W, requires_grad=True, name=f"hidden{i}.W")
        tensors[f"hidden{i}.b"] = Tensor(np.zeros(cfg.hidden_dim), requires_grad=True, name=f"hidden{i}.b")
        fan_in = cfg.hidden_dim
    W = out_scale * rng.standard_normal((fan_in, cfg.data_dim)) / np.sqrt(fan_in)
    tensors["out.W"] = Tensor(W, requires_grad=True, name="out.W")
    tensors["out.b"] = Tensor(np.zeros(cfg.data_dim), requires_grad=True, name="out.b")
    tensors["skip.W"] = Tensor(np.zeros((2 * cfg.time_embed_dim, cfg.data_dim)), requires_grad=True, name="skip.W")
    tensors["skip.b"] = Tensor(np.zeros(cfg.data_dim), requires_grad=True, name="skip.b")
    return ParamSet(cfg, tensors)


def time_embedding(t, n_freq: int, batch: int | None) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    freqs = np.geomspace(1.0, 8.0, n_freq)
    if batch is None:
        ang = float(t) * freqs
    else:
        ang = np.broadcast_to(t, (batch,))[:, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def forward(params: ParamSet, x_t, c, t) -> Tensor:
    """Velocity prediction v(x_t, c, t) with the same shape as ``x_t``."""
    cfg = params.cfg
    x_t, c = ad.as_tensor(x_t), ad.as_tensor(c)
    if x_t.shape[-1] != cfg.data_dim or c.shape != x_t.shape:
        raise ValueError(f"expected x_t and c of matching shape (..., {cfg.data_dim})")
    batch = x_t.shape[0] if x_t.data.ndim == 2 else None
    emb = Tensor(time_embedding(t, cfg.time_embed_dim, batch))
    h = ad.concat([x_t, c, emb], axis=-1)
    for i in range(cfg.num_layers):
        h = ad.activation(ad.affine(h, params[f"hidden{i}.W"], params[f"hidden{i}.b"]), cfg.activation)
    gain = ad.affine(emb, params["skip.W"], params["skip.b"])
    return ad.add(ad.affine(h, params["out.W"], params["out.b"]), ad.mul(gain, x_t))


def null_condition(c) -> np.ndarray:
    return np.zeros_like(c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64))


def guided_forward(params: ParamSet, x_t, c, t, guidance_scale: float = 1.0) -> Tensor:
    """Classifier-free guidance: v_u + w (v_c - v_u) with a zero null condition."""
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    if guidance_scale == 1.0:
        return forward(params, x_t, c, t)
    v_u = forward(params, x_t, null_condition(c), t)
    if guidance_scale == 0.0:
        return v_u
    v_c = forward(params, x_t, c, t)
    return ad.add(v_u, ad.mul(ad.sub(v_c, v_u), guidance_scale))


def drop_condition(c, prob: float, rng: np.random.Generator | int | None) -> np.ndarray:
    """Replace ``c`` by the null condition with probability ``prob``.

    For a (B, d) batch each row is dropped independently.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must lie in [0, 1]")
    rng = np.random.default_rng(rng)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        return np.zeros_like(c) if rng.random() < prob else c.copy()
    keep = rng.random(c.shape[0]) >= prob
    return c * keep[:, None]


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"FGCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: ParamSet, meta: dict | None = None) -> Path:
    """Write ``path`` (binary container) and ``path.manifest`` (text).

    Container layout: magic, u32 version, u32 header length, JSON header
    (model config, tensor names and shapes, caller metadata), then every
    tensor's values as little-endian float64 in header order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(params.tensors)
    header = {
        "model_config": asdict(params.cfg),
        "version_tag": params.version,
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(params[n].data.astype("<f8").tobytes() for n in names)
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + body
    path.write_bytes(blob)
    digest = hashlib.sha256(blob).hexdigest()
    lines = [f"format\tflowgrpo-checkpoint/{CKPT_VERSION}", f"sha256\t{digest}"]
    lines += [f"tensor\t{n}\t{'x'.join(map(str, params[n].shape))}" for n in names]
    path.with_name(path.name + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path, verify: bool = True) -> tuple[ParamSet, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = path.with_name(path.name + ".manifest")
    if verify and manifest.exists():
        want = dict(
            line.split("\t", 1) for line in manifest.read_text(encoding="utf-8").splitlines() if line.startswith("sha256")
        )["sha256"]
        if hashlib.sha256(blob).hexdigest() != want:
            raise ValueError(f"{path}: content hash does not match manifest")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    cfg = ModelConfig(**header["model_config"])
    offset = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        offset += 8 * n
    return ParamSet(cfg, tensors, header.get("version_tag", 0)), header["meta"]
