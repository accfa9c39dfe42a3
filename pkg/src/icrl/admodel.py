"""Algorithm Distillation transformer.

Each environment step becomes one token: ``(prev_action, prev_reward,
prev_done, obs)`` is passed through the encoder MLP of the task's
dimensionality group, a causal pre-norm transformer with ALiBi biases mixes
the sequence, and the group's decoder MLP reads out the action for the
current step. The model never receives a task identifier, only a group id.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch

from . import numerics as nx
from .dataset import GroupId, Manifest, TokenBatch

CKPT_MAGIC = b"ICRLCK01"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class GroupSpec:
    group_id: int
    obs_dim: int
    act_dim: int
    key: str = ""

    @property
    def token_dim(self) -> int:
        return self.act_dim + 2 + self.obs_dim


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    embed_dim: int = 64
    ff_hidden_dim: int = 256
    context_len: int = 512
    groups: tuple[GroupSpec, ...] = ()
    encoder_hidden: int = 128
    decoder_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ModelError("n_layers must be >= 1")
        if self.n_heads < 1 or self.n_heads & (self.n_heads - 1):
            raise ModelError(f"n_heads must be a power of two, got {self.n_heads}")
        if self.embed_dim % self.n_heads:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.context_len < 2:
            raise ModelError("context_len must be >= 2")
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ModelError("duplicate group ids")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def group(self, group_id: int) -> GroupSpec:
        for g in self.groups:
            if g.group_id == group_id:
                return g
        raise ModelError(f"unknown group {group_id}")

    def group_for_key(self, key: str) -> GroupSpec:
        for g in self.groups:
            if g.key == key:
                return g
        raise ModelError(f"no group registered for {key!r}")

    def with_groups_from(self, manifest: Manifest) -> "ModelConfig":
        groups = tuple(GroupSpec(g.group_id, g.obs_dim, g.act_dim, g.key) for g in manifest.groups)
        return ModelConfig(**{**self.to_dict(), "groups": groups})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        d["groups"] = tuple(GroupSpec(**g) if isinstance(g, dict) else g for g in d.get("groups", ()))
        return cls(**d)


def expected_param_count(cfg: ModelConfig) -> int:
    D, F = cfg.embed_dim, cfg.ff_hidden_dim
    block = 4 * D + (D * 3 * D + 3 * D) + (D * D + D) + (D * F + F) + (F * D + D)
    heads = sum(
        (g.token_dim * cfg.encoder_hidden + cfg.encoder_hidden + cfg.encoder_hidden * D + D)
        + (D * cfg.decoder_hidden + cfg.decoder_hidden + cfg.decoder_hidden * g.act_dim + g.act_dim)
        for g in cfg.groups
    )
    return cfg.n_layers * block + 2 * D + heads


class ModelParams:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, torch.Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def parameters(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, v.detach().clone().requires_grad_(v.requires_grad)) for k, v in self.tensors.items()))

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, OrderedDict(
            (k, v.detach().to(dtype).requires_grad_(v.requires_grad)) for k, v in self.tensors.items()))

    def equal(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            torch.equal(a, b) for a, b in zip(self.parameters(), other.parameters()))

    def max_abs_diff(self, other: "ModelParams") -> float:
        return max(float((a.detach() - b.detach()).abs().max()) for a, b in
                   zip(self.parameters(), other.parameters()))


def init(config: ModelConfig, dtype: torch.dtype | None = None) -> ModelParams:
    """Deterministic initialization from ``config.seed``.

    Projections use scaled normals, residual output projections are shrunk by
    ``1/sqrt(2 n_layers)``, biases and norm offsets are zero, norm gains one.
    The decoder's last layer starts small so an untrained model emits
    near-zero actions.
    """
    if not config.groups:
        raise ModelError("config has no groups")
    dtype = dtype or torch.get_default_dtype()
    rng = np.random.default_rng(config.seed)
    D, F = config.embed_dim, config.ff_hidden_dim
    t: "OrderedDict[str, torch.Tensor]" = OrderedDict()

    def normal(name, shape, std):
        t[name] = torch.as_tensor(rng.standard_normal(shape) * std, dtype=dtype)

    def zeros(name, n):
        t[name] = torch.zeros(n, dtype=dtype)

    def ones(name, n):
        t[name] = torch.ones(n, dtype=dtype)

    for g in config.groups:
        p = f"enc.{g.group_id}."
        normal(p + "w1", (g.token_dim, config.encoder_hidden), 1.0 / math.sqrt(g.token_dim))
        zeros(p + "b1", config.encoder_hidden)
        normal(p + "w2", (config.encoder_hidden, D), 1.0 / math.sqrt(config.encoder_hidden))
        zeros(p + "b2", D)
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)
    for i in range(config.n_layers):
        p = f"blocks.{i}."
        ones(p + "ln1.g", D)
        zeros(p + "ln1.b", D)
        normal(p + "attn.wqkv", (D, 3 * D), 0.02)
        zeros(p + "attn.bqkv", 3 * D)
        normal(p + "attn.wo", (D, D), resid_std)
        zeros(p + "attn.bo", D)
        ones(p + "ln2.g", D)
        zeros(p + "ln2.b", D)
        normal(p + "mlp.w1", (D, F), 0.02)
        zeros(p + "mlp.b1", F)
        normal(p + "mlp.w2", (F, D), resid_std)
        zeros(p + "mlp.b2", D)
    ones("ln_f.g", D)
    zeros("ln_f.b", D)
    for g in config.groups:
        p = f"dec.{g.group_id}."
        normal(p + "w1", (D, config.decoder_hidden), 1.0 / math.sqrt(D))
        zeros(p + "b1", config.decoder_hidden)
        normal(p + "w2", (config.decoder_hidden, g.act_dim), 0.02)
        zeros(p + "b2", g.act_dim)
    return ModelParams(config, t)


# --- building blocks, shared with the incremental inference path -----------

def embed_tokens(params: ModelParams, group_id: int, prev_action, prev_reward, prev_done,
                 obs) -> torch.Tensor:
    g = params.config.group(group_id)
    if prev_action.shape[-1] != g.act_dim or obs.shape[-1] != g.obs_dim:
        raise ModelError(
            f"group {group_id} expects act_dim={g.act_dim}, obs_dim={g.obs_dim}; got "
            f"{prev_action.shape[-1]}, {obs.shape[-1]}")
    x = nx.concat([prev_action, prev_reward[..., None], prev_done[..., None], obs])
    p = f"enc.{group_id}."
    h = nx.gelu(nx.linear(x, params[p + "w1"], params[p + "b1"]))
    return nx.linear(h, params[p + "w2"], params[p + "b2"])


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    *lead, T, D = x.shape
    return x.reshape(*lead, T, n_heads, D // n_heads).transpose(-2, -3)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, H, T, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, T, H * dh)


def block_qkv(params: ModelParams, i: int, x: torch.Tensor):
    p = f"blocks.{i}."
    h = nx.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    qkv = nx.linear(h, params[p + "attn.wqkv"], params[p + "attn.bqkv"])
    D = params.config.embed_dim
    q, k, v = nx.split(qkv, [D, D, D])
    H = params.config.n_heads
    return split_heads(q, H), split_heads(k, H), split_heads(v, H)


def block_finish(params: ModelParams, i: int, x: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    p = f"blocks.{i}."
    x = nx.add(x, nx.linear(merge_heads(attn), params[p + "attn.wo"], params[p + "attn.bo"]))
    h = nx.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    h = nx.gelu(nx.linear(h, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    return nx.add(x, nx.linear(h, params[p + "mlp.w2"], params[p + "mlp.b2"]))


def decode(params: ModelParams, group_id: int, x: torch.Tensor) -> torch.Tensor:
    h = nx.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    p = f"dec.{group_id}."
    h = nx.gelu(nx.linear(h, params[p + "w1"], params[p + "b1"]))
    return nx.linear(h, params[p + "w2"], params[p + "b2"])


def encode_tokens(params: ModelParams, batch: TokenBatch) -> torch.Tensor:
    """One embedding per environment step: ``[batch, L, embed_dim]``."""
    return embed_tokens(params, batch.group_id, batch.prev_action, batch.prev_reward,
                        batch.prev_done, batch.obs)


def forward(params: ModelParams, batch: TokenBatch) -> torch.Tensor:
    """Predicted action for every step of the batch, ``[batch, L, act_dim]``."""
    cfg = params.config
    T = batch.shape[1]
    if T > cfg.context_len:
        raise ModelError(f"sequence length {T} exceeds context length {cfg.context_len}")
    x = encode_tokens(params, batch)
    bias = nx.alibi_bias(cfg.n_heads, batch.positions, batch.positions, dtype=x.dtype)
    for i in range(cfg.n_layers):
        q, k, v = block_qkv(params, i, x)
        x = block_finish(params, i, x, nx.causal_attention(q, k, v, bias))
    return decode(params, batch.group_id, x)


def loss(a_pred: torch.Tensor, a_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch, steps and action channels."""
    return nx.mse(a_pred, a_true)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, manifest_hash: str = "",
                    extra: dict[str, Any] | None = None,
                    extra_tensors: dict[str, torch.Tensor] | None = None) -> None:
    """Versioned container: JSON header (config echo, dataset hash, tensor table), raw arrays, CRC32."""
    tensors = OrderedDict((f"param/{k}", v) for k, v in params)
    for k, v in (extra_tensors or {}).items():
        tensors[f"extra/{k}"] = v
    table, blobs = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = json.dumps({
        "format_version": CKPT_VERSION,
        "config": params.config.to_dict(),
        "manifest_hash": manifest_hash,
        "tensors": table,
        "extra": extra or {},
    }, sort_keys=True).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


@dataclass
class Checkpoint:
    params: ModelParams
    manifest_hash: str
    extra: dict[str, Any] = field(default_factory=dict)
    extra_tensors: dict[str, torch.Tensor] = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(data) < len(CKPT_MAGIC) + 12:
        raise CheckpointError(f"{path}: truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    if header["format_version"] > CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header['format_version']}")
    pos = 16 + hlen
    params, extras = OrderedDict(), {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body[pos:pos + n * dt.itemsize], dtype=dt).reshape(entry["shape"])
        pos += n * dt.itemsize
        t = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else extras)[name] = t
    if pos != len(body):
        raise CheckpointError(f"{path}: size does not match tensor table")
    config = ModelConfig.from_dict(header["config"])
    return Checkpoint(ModelParams(config, params), header["manifest_hash"], header["extra"], extras)
