"""Asymmetric encoder-decoder over patch tokens.

The encoder sees only visible tokens: linear patch embedding plus a fixed
2D sine-cosine position table, with one shared learnable angle vector added
to rotated-crop tokens.  The decoder scatters encoded latents back onto the
full grid, fills masked slots with a learnable mask token, adds its own
fixed position table, and predicts pixels for all N positions.

Position tables are constants (buffers), never updated.  All linear weights
are Xavier-uniform with zero bias; the angle vector and mask token are
Gaussian with std 0.02.  Init is a pure function of the config seed.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

CHECKPOINT_MAGIC = b"AMAECKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    p: int = 8
    channels: int = 3
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 1
    dec_heads: int = 4
    use_angle_embedding: bool = True
    seed: int = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.p

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.channels

    def validate(self) -> None:
        if self.image_size < 1 or self.p < 1 or self.image_size % self.p != 0:
            raise ValidationError(
                f"image_size {self.image_size} must be a positive multiple of p={self.p}"
            )
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        for name, dim, heads in (
            ("enc", self.enc_dim, self.enc_heads),
            ("dec", self.dec_dim, self.dec_heads),
        ):
            if heads < 1 or dim % heads != 0:
                raise ValidationError(
                    f"{name}_dim {dim} must divide evenly into {heads} heads"
                )
            if dim % 4 != 0:
                raise ValidationError(
                    f"{name}_dim {dim} must be divisible by 4 for the 2D position table"
                )
        if self.enc_depth < 0 or self.dec_depth < 0:
            raise ValidationError("depths must be >= 0")


def sincos_position_table(grid: int, dim: int) -> np.ndarray:
    """Fixed 2D table, (grid*grid, dim): first half encodes the row index,
    second half the column, each as sin/cos pairs over a 10000-base
    frequency ladder."""
    if dim % 4 != 0:
        raise ValidationError("position table dim must be divisible by 4")

    def axis_table(pos: np.ndarray) -> np.ndarray:
        half = dim // 2
        omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half / 2))
        ang = pos[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rr, cc = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return np.concatenate(
        [axis_table(rr.reshape(-1).astype(np.float64)),
         axis_table(cc.reshape(-1).astype(np.float64))],
        axis=1,
    )


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # each (b, heads, t, dh)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class _Block(nn.Module):
    """Pre-norm transformer block: attention then a GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class ForwardOutput:
    predictions: torch.Tensor  # (..., N, p*p*C), every grid position
    latents: torch.Tensor  # (..., V, enc_dim)


class AngleMaskedAutoencoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.patch_embed = nn.Linear(config.patch_dim, config.enc_dim)
        self.angle_embed = nn.Parameter(torch.zeros(config.enc_dim))
        self.enc_blocks = nn.ModuleList(
            _Block(config.enc_dim, config.enc_heads) for _ in range(config.enc_depth)
        )
        self.enc_norm = nn.LayerNorm(config.enc_dim)
        self.enc_to_dec = nn.Linear(config.enc_dim, config.dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.dec_dim))
        self.dec_blocks = nn.ModuleList(
            _Block(config.dec_dim, config.dec_heads) for _ in range(config.dec_depth)
        )
        self.dec_norm = nn.LayerNorm(config.dec_dim)
        self.pred_head = nn.Linear(config.dec_dim, config.patch_dim)
        self.register_buffer(
            "pos_enc",
            torch.from_numpy(sincos_position_table(config.grid, config.enc_dim)).float(),
            persistent=False,
        )
        self.register_buffer(
            "pos_dec",
            torch.from_numpy(sincos_position_table(config.grid, config.dec_dim)).float(),
            persistent=False,
        )
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        g = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    bound = math.sqrt(6.0 / (m.in_features + m.out_features))
                    m.weight.uniform_(-bound, bound, generator=g)
                    m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
            self.angle_embed.normal_(0.0, 0.02, generator=g)
            self.mask_token.normal_(0.0, 0.02, generator=g)

    # ----- encoder -----

    def embed_tokens(
        self,
        patches: torch.Tensor,  # (B, N, p*p*C)
        visible: torch.Tensor,  # (B, V) grid indices
        angle_flags: torch.Tensor,  # (B, V) bool, True on rotated-crop tokens
    ) -> torch.Tensor:
        x = self.patch_embed(patches) + self.pos_enc
        idx = visible.unsqueeze(-1).expand(-1, -1, x.shape[-1])
        tokens = torch.gather(x, 1, idx)
        if self.config.use_angle_embedding:
            tokens = tokens + angle_flags.unsqueeze(-1).to(tokens.dtype) * self.angle_embed
        return tokens

    def embed_visible(
        self,
        patches: torch.Tensor,  # (N, p*p*C), one sample
        crop_visible: torch.Tensor,
        bg_visible: torch.Tensor,
    ) -> torch.Tensor:
        """Token sequence for one sample: crop visibles first, then
        background visibles, each already in ascending order."""
        visible = torch.cat([crop_visible, bg_visible]).unsqueeze(0)
        flags = torch.cat(
            [
                torch.ones(crop_visible.numel(), dtype=torch.bool),
                torch.zeros(bg_visible.numel(), dtype=torch.bool),
            ]
        ).unsqueeze(0)
        return self.embed_tokens(patches.unsqueeze(0), visible, flags).squeeze(0)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        single = tokens.dim() == 2
        x = tokens.unsqueeze(0) if single else tokens
        for blk in self.enc_blocks:
            x = blk(x)
        x = self.enc_norm(x)
        return x.squeeze(0) if single else x

    # ----- decoder -----

    def decode(self, latents: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        single = latents.dim() == 2
        if single:
            latents = latents.unsqueeze(0)
            visible = visible.unsqueeze(0)
        y = self.enc_to_dec(latents)  # (B, V, dec_dim)
        b = y.shape[0]
        n = self.config.n_patches
        full = self.mask_token.view(1, 1, -1).expand(b, n, -1).to(y.dtype).clone()
        full.scatter_(1, visible.unsqueeze(-1).expand(-1, -1, y.shape[-1]), y)
        full = full + self.pos_dec
        for blk in self.dec_blocks:
            full = blk(full)
        preds = self.pred_head(self.dec_norm(full))
        return preds.squeeze(0) if single else preds

    def forward(
        self,
        patches: torch.Tensor,
        visible: torch.Tensor,
        angle_flags: torch.Tensor,
    ) -> ForwardOutput:
        tokens = self.embed_tokens(patches, visible, angle_flags)
        latents = self.encode(tokens)
        preds = self.decode(latents, visible)
        return ForwardOutput(predictions=preds, latents=latents)


def build_model(config: ModelConfig) -> AngleMaskedAutoencoder:
    return AngleMaskedAutoencoder(config)


# ----- gradient verification -----


def gradcheck(
    model: AngleMaskedAutoencoder,
    loss_fn: Callable[[], torch.Tensor],
    n_samples: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare autograd gradients against central finite differences on at
    least n_samples scalar parameters spread over every parameter tensor.
    loss_fn must be a deterministic closure over the model's current
    parameters (anything stochastic, like a transport plan, must be frozen
    inside it).  Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
    The model must be float64; float32 drowns the differences in noise."""
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if any(p.dtype != torch.float64 for _, p in params):
        raise ValidationError("gradcheck requires a float64 model (model.double())")
    model.zero_grad()
    loss = loss_fn()
    loss.backward()
    per_tensor = max(1, math.ceil(n_samples / len(params)))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _, p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        count = min(per_tensor, flat.numel())
        for i in rng.choice(flat.numel(), size=count, replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                lo_hi = float(loss_fn())
                flat[i] = orig - step
                lo_lo = float(loss_fn())
                flat[i] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * step)
            analytic = grad[i].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


# ----- checkpoint container -----
#
# Layout, all integers little-endian:
#   8s  magic "AMAECKPT"
#   u32 format version
#   u32 config block length, then that many bytes of "key=value\n" utf-8
#   u32 tensor count
#   per tensor: u16 name length, name utf-8, u8 ndim, u32 * ndim shape,
#               u64 byte offset into the payload
#   payload: raw float32 little-endian tensor data, concatenated


def _config_block(config_map: dict[str, str]) -> bytes:
    return "".join(f"{k}={v}\n" for k, v in config_map.items()).encode("utf-8")


def save_checkpoint(
    path: str | Path,
    model: AngleMaskedAutoencoder,
    extra_config: dict[str, str] | None = None,
) -> None:
    config_map = {
        f.name: str(getattr(model.config, f.name))
        for f in dataclasses.fields(ModelConfig)
    }
    if extra_config:
        config_map.update({k: str(v) for k, v in extra_config.items()})
    cfg = _config_block(config_map)
    names, arrays = [], []
    for name, p in model.named_parameters():
        names.append(name)
        arrays.append(np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4"))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(names)))
        offset = 0
        for name, arr in zip(names, arrays):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<Q", offset))
            offset += arr.nbytes
        for arr in arrays:
            f.write(arr.tobytes())


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValidationError(f"{self.what}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    version = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    cfg_len = r.unpack("<I")
    config_map: dict[str, str] = {}
    for line in r.take(cfg_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        if key:
            config_map[key] = value
    entries = []
    for _ in range(r.unpack("<I")):
        name = r.take(r.unpack("<H")).decode("utf-8")
        ndim = r.unpack("<B")
        shape = tuple(
            struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        ) if ndim else ()
        offset = r.unpack("<Q")
        entries.append((name, shape, offset))
    payload = r.buf[r.pos :]
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        n_elem = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n_elem
        if end > len(payload):
            raise ValidationError(f"{path}: truncated payload for tensor {name}")
        tensors[name] = np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape)
    return config_map, tensors


def model_config_from_map(config_map: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name not in config_map:
            raise ValidationError(f"checkpoint config missing field {f.name}")
        raw = config_map[f.name]
        if f.type == "bool":
            kwargs[f.name] = raw.strip().lower() in ("true", "1")
        else:
            kwargs[f.name] = int(raw)
    return ModelConfig(**kwargs)


def load_model(path: str | Path) -> tuple[AngleMaskedAutoencoder, dict[str, str]]:
    """Rebuild the model a checkpoint describes and load its weights.
    Rejects wrong magic or version and any missing/mis-shaped tensor."""
    config_map, tensors = read_checkpoint(path)
    model = AngleMaskedAutoencoder(model_config_from_map(config_map))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ValidationError(f"{path}: checkpoint missing tensor {name}")
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValidationError(
                    f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))
    return model, config_map
