"""Learnable building blocks: encoder, SPPF, MHBC, FiLM, MoE adapter, view fusion, decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import check_same_shape, maxpool_same

COND_DIM = 10


@dataclass
class BlockConfig:
    base_channels: int = 16
    encoder_stages: int = 5
    d_v: int = 64
    d_k: int = 32
    heads: int = 4
    sppf_kernel: int = 5
    tokens_h: int = 2
    tokens_w: int = 2
    kv_schedule: tuple[int, ...] = (1, 1, 3, 3)
    film_hidden: int = 32
    norm: str = "group"  # encoder normalization: "group" or "none"

    def validate(self) -> None:
        if self.d_k * 2 != self.d_v:
            raise ValueError(f"d_k must be d_v/2 (d_v={self.d_v}, d_k={self.d_k})")
        if self.d_v % self.heads or self.d_k % self.heads:
            raise ValueError(f"d_v={self.d_v} and d_k={self.d_k} must be divisible by heads={self.heads}")
        if self.sppf_kernel % 2 == 0:
            raise ValueError("sppf_kernel must be odd")
        if self.encoder_stages < 1 or self.base_channels < 1:
            raise ValueError("encoder_stages and base_channels must be positive")
        if self.norm not in ("group", "none"):
            raise ValueError(f"norm must be 'group' or 'none', got {self.norm!r}")
        if len(self.kv_schedule) != 4 or any(k % 2 == 0 for k in self.kv_schedule):
            raise ValueError("kv_schedule must hold four odd kernel sizes")

    @property
    def stride(self) -> int:
        return 2**self.encoder_stages

    @property
    def tokens(self) -> int:
        return self.tokens_h * self.tokens_w


def build_input(image: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Append normalized-plane coordinates to RGB.

    image: (B, 3, H, W) in [0, 1]; k: (B, 4) as (fx, fy, cx, cy).
    Returns (B, 5, H, W).
    """
    b, _, h, w = image.shape
    u = torch.arange(w, dtype=image.dtype)
    v = torch.arange(h, dtype=image.dtype)
    fx, fy, cx, cy = (k[:, i].to(image.dtype) for i in range(4))
    xn = (u[None, :] - cx[:, None]) / fx[:, None]  # (B, W)
    yn = (v[None, :] - cy[:, None]) / fy[:, None]  # (B, H)
    xn = xn[:, None, None, :].expand(b, 1, h, w)
    yn = yn[:, None, :, None].expand(b, 1, h, w)
    return torch.cat([image, xn, yn], 1)


def conv(cin, cout, k=3, stride=1, groups=1, dilation=1, bias=True):
    return nn.Conv2d(cin, cout, k, stride, padding=dilation * (k // 2), dilation=dilation, groups=groups, bias=bias)


def norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.GroupNorm(min(8, channels // 2) or 1, channels)


class ResidualStage(nn.Module):
    def __init__(self, cin, cout, norm: str = "group"):
        super().__init__()
        self.conv1 = conv(cin, cout, 3, stride=2)
        self.n1 = norm_layer(norm, cout)
        self.conv2 = conv(cout, cout, 3)
        self.n2 = norm_layer(norm, cout)
        self.shortcut = conv(cin, cout, 1, stride=2)

    def forward(self, x):
        y = self.n2(self.conv2(F.silu(self.n1(self.conv1(x)))))
        return F.silu(y + self.shortcut(x))


class Encoder(nn.Module):
    """Stride-2 stem followed by stride-2 residual stages (total stride 2**stages)."""

    def __init__(self, cfg: BlockConfig, in_channels: int = 5):
        super().__init__()
        self.stride = cfg.stride
        b = cfg.base_channels
        widths = [min(b * 2**i, cfg.d_v) for i in range(cfg.encoder_stages)]
        widths[-1] = cfg.d_v
        self.stem = conv(in_channels, widths[0], 3, stride=2)
        self.stem_norm = norm_layer(cfg.norm, widths[0])
        self.stages = nn.ModuleList(
            ResidualStage(widths[i - 1], widths[i], cfg.norm) for i in range(1, len(widths))
        )

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"encoder: input {h}x{w} must be divisible by {self.stride}")
        x = F.silu(self.stem_norm(self.stem(x)))
        for stage in self.stages:
            x = stage(x)
        return x


class SPPF(nn.Module):
    def __init__(self, channels: int, kernel: int = 5):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"SPPF kernel must be odd, got {kernel}")
        hidden = channels // 2
        self.kernel = kernel
        self.reduce = conv(channels, hidden, 1)
        self.fuse = conv(4 * hidden, channels, 1)

    def pyramid(self, f):
        z = [F.silu(self.reduce(f))]
        for _ in range(3):
            z.append(maxpool_same(z[-1], self.kernel))
        return z

    def forward(self, f):
        return F.silu(self.fuse(torch.cat(self.pyramid(f), 1)))


class CrossPSA(nn.Module):
    """Position-sensitive cross-attention with a feed-forward residual.

    Queries come from the first view, keys and values from the second. The
    global-position term maps each query's attention row over the N_k keys
    through W_c, so W_c is tied to a fixed token grid.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.heads = cfg.heads
        self.d_v, self.d_k = cfg.d_v, cfg.d_k
        self.tokens = cfg.tokens
        c = cfg.d_v
        self.q = conv(c, cfg.d_k, 1)
        self.k = conv(c, cfg.d_k, 1, bias=False)  # a key bias only shifts each score row; softmax ignores it
        self.v = conv(c, cfg.d_v, 1)
        self.w_c = nn.Parameter(torch.randn(cfg.d_v, cfg.tokens) / math.sqrt(cfg.tokens))
        self.pe2 = conv(c, c, 3, groups=c, dilation=2)
        self.pe3 = conv(c, c, 3, groups=c, dilation=3)
        self.proj = conv(c, c, 1)
        self.ffn1 = conv(c, 2 * c, 1)
        self.ffn2 = conv(2 * c, c, 1)
        self.last_attention = None

    def attention(self, fi, fj):
        b, c, h, w = fi.shape
        n = h * w
        if n != self.tokens:
            raise ValueError(
                f"MHBC: {h}x{w} grid has {n} tokens but W_c was built for {self.tokens}; "
                "the attention block only supports its configured resolution"
            )
        dkh = self.d_k // self.heads
        q = self.q(fi).reshape(b, self.heads, dkh, n)
        k = self.k(fj).reshape(b, self.heads, dkh, n)
        return torch.softmax(q.transpose(-1, -2) @ k / math.sqrt(dkh), -1)  # (B, heads, Nq, Nk)

    def psi(self, fi, fj):
        b, c, h, w = fi.shape
        n = h * w
        a = self.attention(fi, fj)
        self.last_attention = a.detach()
        dvh = self.d_v // self.heads
        v = self.v(fj).reshape(b, self.heads, dvh, n)
        content = v @ a.transpose(-1, -2)  # (B, heads, dvh, Nq)
        position = self.w_c.reshape(self.heads, dvh, n) @ a.transpose(-1, -2)
        y = (content + position).reshape(b, c, h, w)
        return self.proj(y + self.pe2(y) + self.pe3(y))

    def forward(self, fi, fj):
        x = fi + self.psi(fi, fj)
        return x + self.ffn2(F.silu(self.ffn1(x)))


class MHBC(nn.Module):
    """Bidirectional cross-attention; both directions share one CrossPSA."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.block = CrossPSA(cfg)

    def forward(self, f0, f1):
        check_same_shape("MHBC", f0, f1)
        b = f0.shape[0]
        out = self.block(torch.cat([f0, f1]), torch.cat([f1, f0]))
        return out[:b], out[b:]


class FiLM(nn.Module):
    def __init__(self, channels: int, cond_dim: int = COND_DIM, hidden: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(cond_dim, hidden)
        self.fc2 = nn.Linear(hidden, 2 * channels)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, f, cond):
        gamma, beta = self.fc2(F.silu(self.fc1(cond))).chunk(2, -1)
        return film_apply(f, gamma, beta)


def film_apply(f, gamma, beta):
    return (1 + gamma)[..., None, None] * f + beta[..., None, None]


class MoEAdapter(nn.Module):
    def __init__(self, cin: int, cout: int, experts: int = 2):
        super().__init__()
        self.gate = nn.Linear(cin, experts)
        self.experts = nn.ModuleList(conv(cin, cout, 1) for _ in range(experts))

    def gates(self, f, logits=None):
        if logits is None:
            logits = self.gate(f.mean((2, 3)))
        return torch.softmax(logits, -1)

    def forward(self, f, logits=None):
        g = self.gates(f, logits)
        return sum(g[:, e, None, None, None] * expert(f) for e, expert in enumerate(self.experts))


class RobustBottleneck(nn.Module):
    """Bottleneck over the stacked (V, H, W) volume, residual branch gated by cross-view statistics.

    The reduce conv spans ``kernel`` views as well as ``kernel`` x ``kernel`` cells, so
    with kernel 3 each view sees the other through position-specific taps; that is
    what lets the fused features tell view 0 from view 1.
    """

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.reduce = nn.Conv3d(channels, channels // 2, kernel, padding=kernel // 2)
        self.expand = conv(channels // 2, channels, 1)
        self.gate = conv(2 * channels, channels, 1)

    def forward(self, x):  # x: (B, V, C, H, W)
        b, v, c, h, w = x.shape
        r = F.silu(self.reduce(x.transpose(1, 2))).transpose(1, 2)
        branch = self.expand(r.reshape(b * v, -1, h, w)).reshape(b, v, c, h, w)
        stats = torch.cat([x.mean(1), x.amax(1)], 1)
        g = torch.sigmoid(self.gate(stats))[:, None]
        return x + g * branch


class ViewFusion(nn.Module):
    def __init__(self, channels: int, kv_schedule=(1, 1, 3, 3)):
        super().__init__()
        self.blocks = nn.ModuleList(RobustBottleneck(channels, k) for k in kv_schedule)
        self.dw = conv(channels, channels, 3, groups=channels)
        self.pw = conv(channels, channels, 1)
        self.logits = conv(channels, 1, 1)
        nn.init.zeros_(self.logits.weight)
        nn.init.zeros_(self.logits.bias)
        self.last_weights = None

    def process(self, f0, f1):
        """Per-view features after the gated bottlenecks and refinement, (B, V, C, H, W)."""
        check_same_shape("ViewFusion", f0, f1)
        x = torch.stack([f0, f1], 1)
        for blk in self.blocks:
            x = blk(x)
        b, v, c, h, w = x.shape
        flat = x.reshape(b * v, c, h, w)
        return (flat + self.pw(F.silu(self.dw(flat)))).reshape(b, v, c, h, w)

    def forward(self, f0, f1):
        x = self.process(f0, f1)
        b, v, c, h, w = x.shape
        weights = torch.softmax(self.logits(x.reshape(b * v, c, h, w)).reshape(b, v, 1, h, w), 1)
        self.last_weights = weights.detach()
        return (weights * x).sum(1)


class Decoder(nn.Module):
    """MoE adapter -> view fusion -> FiLM -> conv head -> pooled linear output.

    Inputs carry one extra validity channel; ``out_dim`` is 6 for the
    (pose, log-variance) heads.
    """

    def __init__(self, cfg: BlockConfig, in_channels: int | None = None, out_dim: int = 6):
        super().__init__()
        c = cfg.d_v
        cin = c + 1 if in_channels is None else in_channels
        self.adapter = MoEAdapter(cin, c)
        self.fusion = ViewFusion(c, cfg.kv_schedule)
        self.film = FiLM(c, COND_DIM, cfg.film_hidden)
        self.skip = conv(cin, c, 1) if cin != c else nn.Identity()
        self.conv1 = conv(c, c, 3)
        self.conv2 = conv(c, c, 3)
        self.head = nn.Linear(c, out_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def features(self, f0, f1, cond):
        fused = self.fusion(self.adapter(f0), self.adapter(f1))
        x = self.film(fused, cond) + self.skip(0.5 * (f0 + f1))
        return x + self.conv2(F.silu(self.conv1(x)))

    def forward(self, f0, f1, cond):
        out = self.head(self.features(f0, f1, cond).mean((2, 3)))
        return out[:, :3], out[:, 3:]


def conditioning(k4: torch.Tensor, image_size, omega: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """(fx/W, fy/H, cx/W, cy/H, omega, log_var) -> (B, 10)."""
    h, w = image_size
    scale = torch.tensor([w, h, w, h], dtype=omega.dtype)
    return torch.cat([k4.to(omega.dtype) / scale, omega, log_var], -1)
