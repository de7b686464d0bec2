"""Distortion-field regression network, losses and checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    EmptyMask,
    FormatError,
    GridTooSmall,
    NonFiniteActivation,
    NonFiniteGradient,
    ShapeMismatch,
)
from .field import BLOCK_SIZE, DistortionField, grid_mask, normalize_image

DFNN_MAGIC = b"DFNN"
DFNN_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 128
    base_channels: int = 16
    num_residual_blocks: int = 4
    pyramid_dilations: tuple[int, ...] = (1, 2, 4)
    include_gap_branch: bool = True
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        object.__setattr__(self, "pyramid_dilations", tuple(int(d) for d in self.pyramid_dilations))
        if self.block_size != 16:
            raise ValueError("the network downsamples by exactly 16")
        if self.input_size <= 0 or self.input_size % 16:
            raise ValueError("input_size must be a positive multiple of 16")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        d = self.pyramid_dilations
        if not d or any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise ValueError("pyramid_dilations must be nonempty and strictly increasing")

    @property
    def grid_size(self) -> int:
        return self.input_size // 16

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = line.split("=", 1)
            kw[key] = value
        return cls(
            input_size=int(kw["input_size"]),
            base_channels=int(kw["base_channels"]),
            num_residual_blocks=int(kw["num_residual_blocks"]),
            pyramid_dilations=tuple(int(x) for x in kw["pyramid_dilations"].split(",")),
            include_gap_branch=kw["include_gap_branch"] == "True",
            block_size=int(kw["block_size"]),
        )


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, stride=1, dilation=1):
        pad = dilation * (kernel // 2)
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=pad, dilation=dilation),
            nn.GroupNorm(_groups(cout), cout),
            nn.ReLU(),
        )


class CoordinateAttention(nn.Module):
    """Channel gates factored into a row encoding and a column encoding."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        mid = max(8, channels // reduction)
        self.squeeze = nn.Conv2d(channels, mid, 1)
        self.norm = nn.GroupNorm(1, mid)
        self.gate_h = nn.Conv2d(mid, channels, 1)
        self.gate_w = nn.Conv2d(mid, channels, 1)

    def forward(self, x):
        _, _, h, w = x.shape
        pool_h = x.mean(dim=3, keepdim=True)  # b,c,h,1
        pool_w = x.mean(dim=2, keepdim=True).transpose(2, 3)  # b,c,w,1
        y = F.relu(self.norm(self.squeeze(torch.cat([pool_h, pool_w], dim=2))))
        yh, yw = torch.split(y, [h, w], dim=2)
        a_h = torch.sigmoid(self.gate_h(yh))
        a_w = torch.sigmoid(self.gate_w(yw.transpose(2, 3)))
        return x * a_h * a_w


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class SpatialPyramid(nn.Module):
    """Parallel 1x1, dilated 3x3 and global-average-pooling branches, fused by a 1x1 conv."""

    def __init__(self, cin: int, cout: int, dilations, gap: bool = True):
        super().__init__()
        self.branches = nn.ModuleList([ConvNormAct(cin, cout, kernel=1)])
        self.branches.extend(ConvNormAct(cin, cout, kernel=3, dilation=d) for d in dilations)
        self.gap = nn.Conv2d(cin, cout, 1) if gap else None
        n = len(self.branches) + (1 if gap else 0)
        self.fuse = ConvNormAct(n * cout, cout, kernel=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        if self.gap is not None:
            g = F.relu(self.gap(x.mean(dim=(2, 3), keepdim=True)))
            outs.append(g.expand(-1, -1, x.shape[2], x.shape[3]))
        return self.fuse(torch.cat(outs, dim=1))


class DistortionNet(nn.Module):
    """Image + mask in, displacement field on the 1/16 grid out (channels x, y)."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        widths = [c, 2 * c, 4 * c, 8 * c]
        self.down = nn.Sequential(*[ConvNormAct(cin, cout, stride=2) for cin, cout in zip([1] + widths[:-1], widths)])
        top = widths[-1]
        self.attention = CoordinateAttention(top + 1)
        self.merge = ConvNormAct(top + 1, top, kernel=1)
        self.residual = nn.Sequential(*[ResidualBlock(top) for _ in range(config.num_residual_blocks)])
        self.pyramid = SpatialPyramid(top, top, config.pyramid_dilations, config.include_gap_branch)
        self.head_attention = CoordinateAttention(top)
        self.head = ConvNormAct(top, widths[1])
        self.out = nn.Conv2d(widths[1], 2, 1)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``image``: (b,1,s,s) normalized; ``mask``: (b,1,s/16,s/16) grid mask. Returns (b,2,s/16,s/16)."""
        x = self.down(image)
        x = torch.cat([x, mask.to(x.dtype)], dim=1)
        x = self.merge(self.attention(x))
        x = self.residual(x)
        x = self.pyramid(x)
        x = self.head(self.head_attention(x))
        return self.out(x)


def build_network(config: NetworkConfig, seed: int = 0) -> DistortionNet:
    """Seeded fan-in-scaled uniform initialisation (torch's default conv scheme)."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = DistortionNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def zero_network(config: NetworkConfig) -> DistortionNet:
    net = DistortionNet(config)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    return net


# --- input preparation -----------------------------------------------------


def prepare_inputs(image: np.ndarray, mask: np.ndarray, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized image tensor (1,1,s,s) and grid-mask tensor (1,1,s/16,s/16)."""
    norm = normalize_image(image, mask)
    gm = grid_mask(mask, BLOCK_SIZE)
    return (
        torch.as_tensor(norm, dtype=dtype)[None, None],
        torch.as_tensor(gm, dtype=dtype)[None, None],
    )


def field_to_tensor(field: DistortionField, dtype=torch.float32) -> torch.Tensor:
    return torch.tensor(np.ascontiguousarray(field.vectors.transpose(2, 0, 1)), dtype=dtype)[None]


def tensor_to_field(t: torch.Tensor) -> DistortionField:
    return DistortionField(t.detach().double().cpu().numpy()[0].transpose(1, 2, 0), BLOCK_SIZE)


def forward(net: DistortionNet, image: np.ndarray, mask: np.ndarray) -> DistortionField:
    """Estimate the distortion field of a single square image."""
    s = net.config.input_size
    if image.shape != (s, s) or np.shape(mask) != (s, s):
        raise ShapeMismatch(f"network expects {s}x{s} inputs, got {image.shape}")
    dtype = next(net.parameters()).dtype
    x, m = prepare_inputs(image, mask, dtype)
    with torch.no_grad():
        out = net(x, m)
    if not torch.isfinite(out).all():
        raise NonFiniteActivation("network output contains NaN or Inf")
    return tensor_to_field(out)


# --- losses ----------------------------------------------------------------


def loss_reg(est: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared error over in-mask cells divided by the in-mask cell count.

    Shapes: fields (b,2,h,w), mask (b,1,h,w). Counts are pooled over the batch.
    """
    m = mask.to(est.dtype)
    count = m.sum()
    if count <= 0:
        raise EmptyMask("regression loss needs at least one in-mask cell")
    return (((est - gt) * m) ** 2).sum() / count


def field_gradients(est: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences with replicate boundary (last row/column differences are zero)."""
    dx = torch.zeros_like(est)
    dy = torch.zeros_like(est)
    dx[..., :, :-1] = est[..., :, 1:] - est[..., :, :-1]
    dy[..., :-1, :] = est[..., 1:, :] - est[..., :-1, :]
    return dx, dy


def loss_smo(est: torch.Tensor) -> torch.Tensor:
    """Mean over grid cells of the squared gradient magnitudes of both channels."""
    b, _, h, w = est.shape
    if h < 2 or w < 2:
        raise GridTooSmall("smoothness loss needs a grid of at least 2x2")
    dx, dy = field_gradients(est)
    return (dx**2 + dy**2).sum() / (b * h * w)


@dataclass(frozen=True)
class LossBreakdown:
    reg: float
    smo: float
    total: float
    lambda_smo: float = 1.0


def loss_total(est, gt, mask, lambda_smo: float = 1.0) -> tuple[torch.Tensor, LossBreakdown]:
    reg = loss_reg(est, gt, mask)
    smo = loss_smo(est)
    total = reg + lambda_smo * smo
    r, sm = float(reg.detach()), float(smo.detach())
    return total, LossBreakdown(r, sm, r + lambda_smo * sm, lambda_smo)


def field_losses(est: DistortionField, gt: DistortionField, mask: np.ndarray, lambda_smo: float = 1.0) -> LossBreakdown:
    """Loss breakdown for numpy-side fields; ``mask`` is a pixel or grid mask."""
    gm = np.asarray(mask, dtype=bool)
    if gm.shape != (est.grid_h, est.grid_w):
        gm = grid_mask(gm, est.block_size)
    e = field_to_tensor(est, torch.float64)
    g = field_to_tensor(gt, torch.float64)
    m = torch.as_tensor(gm, dtype=torch.float64)[None, None]
    return loss_total(e, g, m, lambda_smo)[1]


def backward(
    net: DistortionNet,
    image: np.ndarray,
    mask: np.ndarray,
    gt: DistortionField,
    lambda_smo: float = 1.0,
) -> dict[str, np.ndarray]:
    """Gradients of the total loss w.r.t. every named parameter tensor."""
    dtype = next(net.parameters()).dtype
    x, m = prepare_inputs(image, mask, dtype)
    net.zero_grad(set_to_none=True)
    total, _ = loss_total(net(x, m), field_to_tensor(gt, dtype), m, lambda_smo)
    total.backward()
    grads = {}
    for name, p in net.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        grads[name] = g.detach().cpu().numpy().copy()
    return grads


# --- checkpoint ------------------------------------------------------------


def save_checkpoint(path, net: DistortionNet) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_bytes(net: DistortionNet) -> bytes:
    cfg = net.config.to_text().encode()
    state = net.state_dict()
    parts = [DFNN_MAGIC, struct.pack("<I", DFNN_VERSION), struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> DistortionNet:
    raw = Path(path).read_bytes()
    if raw[:4] != DFNN_MAGIC:
        raise FormatError(f"{path}: not a DFNN checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != DFNN_VERSION:
        raise FormatError(f"{path}: unsupported DFNN version {version}")
    (clen,) = struct.unpack_from("<I", raw, 8)
    off = 12
    config = NetworkConfig.from_text(raw[off:off + clen].decode())
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        state[name] = torch.from_numpy(arr.copy())
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    net = DistortionNet(config)
    net.load_state_dict(state)
    return net


def parameter_count(net: DistortionNet) -> int:
    return sum(p.numel() for p in net.parameters())
