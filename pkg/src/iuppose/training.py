"""AdamW, one-cycle schedule, gradient clipping, the training loop and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .autodiff import backward
from .losses import LossBreakdown, total_loss
from .model import AblationFlags, IUPPose
from .scenes import PairDataset

log = logging.getLogger(__name__)

MAGIC = b"IUPPOSE1"
LOG_FIELDS = ["step", "lr"] + [f.name for f in fields(LossBreakdown)]


@dataclass
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    grad_clip: float = 5.0
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    start_factor: float = 25.0
    end_factor: float = 1e4
    checkpoint_every: int = 0
    refined_target: str = "composed"
    detach_uncert_error: bool = False
    augment: bool = True

    def validate(self) -> None:
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError("warmup_steps must be in [0, total_steps)")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0 or self.batch_size < 1:
            raise ValueError("lr and weight_decay must be >= 0; grad_clip and batch_size positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("betas must be in [0, 1) and eps positive")


def onecycle_lr(step: int, cfg: OptimConfig) -> float:
    """Linear warmup from lr/start_factor to lr, then cosine decay to lr/end_factor at total_steps."""
    peak = cfg.lr
    if step < cfg.warmup_steps:
        start = peak / cfg.start_factor
        return start + (peak - start) * step / cfg.warmup_steps
    final = peak / cfg.end_factor
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return final + (peak - final) * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))


def clip_gradients(params, max_norm: float = 5.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``; returns the scale."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 1.0
    norm = torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])).item()
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g.mul_(scale)
    return scale


@torch.no_grad()
def adamw_step(params, grads, state: dict, lr: float, cfg: OptimConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``state`` holds the step count and per-parameter first/second moments.
    """
    state["step"] = t = state.get("step", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    bc1 = 1 - cfg.beta1**t
    bc2 = 1 - cfg.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = torch.zeros_like(p)
        m = m_all.setdefault(i, torch.zeros_like(p))
        v = v_all.setdefault(i, torch.zeros_like(p))
        p.mul_(1 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


def batch_tensors(ds: PairDataset, idx, dtype=torch.float32):
    def img(a):
        return torch.from_numpy(a[idx]).to(dtype).permute(0, 3, 1, 2) / 255.0

    t = ds.t_dir[idx] * ds.t_mag[idx][:, None]
    return dict(
        i0=img(ds.i0), i1=img(ds.i1),
        k0=torch.tensor(ds.k0[idx], dtype=dtype), k1=torch.tensor(ds.k1[idx], dtype=dtype),
        gt_r=torch.tensor(ds.gt_r[idx], dtype=dtype), gt_t=torch.tensor(t, dtype=dtype),
    )


def _reflect(b: dict, i: int, s: torch.Tensor, img_dims, k_perm, size) -> None:
    """Apply the camera-frame reflection ``s`` (S = S^-1) to sample ``i`` of a batch in place.

    X -> S X gives R -> S R S and t -> S t; the images are flipped or
    transposed to match and the principal point mirrored.
    """
    for key in ("i0", "i1"):
        img = b[key][i]
        if img_dims == "T":
            img = img.transpose(-1, -2)
        elif img_dims:
            img = img.flip(img_dims)
        b[key][i] = img.clone()
    for key in ("k0", "k1"):
        k = b[key][i][k_perm].clone()
        if img_dims == (-1,):
            k[2] = size[1] - 1 - k[2]
        elif img_dims == (-2,):
            k[3] = size[0] - 1 - k[3]
        b[key][i] = k
    b["gt_r"][i] = s @ b["gt_r"][i] @ s
    b["gt_t"][i] = s @ b["gt_t"][i]


def augment_batch(b: dict, rng: np.random.Generator) -> dict:
    """Random exact-label augmentation: image flips/transpose (dihedral group) and view swap."""
    b = {k: v.clone() for k, v in b.items()}
    n = b["i0"].shape[0]
    h, w = b["i0"].shape[-2:]
    dt = b["gt_r"].dtype
    fx = torch.diag(torch.tensor([-1.0, 1.0, 1.0], dtype=dt))
    fy = torch.diag(torch.tensor([1.0, -1.0, 1.0], dtype=dt))
    tr = torch.tensor([[0.0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=dt)
    ident = [0, 1, 2, 3]
    for i in range(n):
        flip_x, flip_y, transpose, swap = rng.integers(0, 2, 4)
        if flip_x:
            _reflect(b, i, fx, (-1,), ident, (h, w))
        if flip_y:
            _reflect(b, i, fy, (-2,), ident, (h, w))
        if transpose and h == w:
            _reflect(b, i, tr, "T", [1, 0, 3, 2], (h, w))
        if swap:
            r = b["gt_r"][i].clone()
            b["i0"][i], b["i1"][i] = b["i1"][i].clone(), b["i0"][i].clone()
            b["k0"][i], b["k1"][i] = b["k1"][i].clone(), b["k0"][i].clone()
            b["gt_r"][i] = r.T
            b["gt_t"][i] = -(r.T @ b["gt_t"][i])
    return b


def batch_order(n: int, batch_size: int, steps: int, seed: int):
    """Seeded shuffled index batches, reshuffling every epoch."""
    rng = np.random.default_rng(seed)
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm, pos = rng.permutation(n), 0
        yield perm[pos : pos + batch_size] if batch_size <= n else perm
        pos += batch_size


def train_loop(
    model: IUPPose,
    dataset: PairDataset,
    cfg: OptimConfig,
    flags: AblationFlags | None = None,
    log_path=None,
    ckpt_path=None,
):
    """Run ``cfg.total_steps`` optimizer steps; returns the list of logged rows."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("train_loop: dataset is empty")
    flags = flags or model.flags
    params = [p for p in model.parameters() if p.requires_grad]
    state: dict = {}
    dtype = next(model.parameters()).dtype
    rows = []
    log_file = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_file) if log_file else None
    if writer:
        writer.writerow(LOG_FIELDS)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    model.train()
    try:
        for step, idx in enumerate(batch_order(len(dataset), cfg.batch_size, cfg.total_steps, cfg.seed)):
            lr = onecycle_lr(step, cfg)
            b = batch_tensors(dataset, idx, dtype)
            if cfg.augment:
                b = augment_batch(b, aug_rng)
            est = model(b["i0"], b["i1"], b["k0"], b["k1"])
            losses = total_loss(est, b["gt_r"], b["gt_t"], flags, cfg.refined_target, cfg.detach_uncert_error)
            values = losses.as_floats()
            bad = [k for k, v in values.items() if not math.isfinite(v)]
            if bad:
                raise FloatingPointError(f"non-finite loss at step {step}: {', '.join(bad)}")
            for p in params:
                p.grad = None
            backward(losses.total)
            clip_gradients(params, cfg.grad_clip)
            adamw_step(params, [p.grad for p in params], state, lr, cfg)
            row = [step, lr] + [values[k] for k in LOG_FIELDS[2:]]
            rows.append(row)
            if writer:
                writer.writerow([repr(float(x)) if i else x for i, x in enumerate(row)])
            if step % 100 == 0:
                log.info("step %d lr %.3g loss %.4f", step, lr, values["total"])
            if ckpt_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, f"{ckpt_path}.step{step + 1}")
    finally:
        if log_file:
            log_file.close()
    if ckpt_path:
        save_checkpoint(model, ckpt_path)
    return rows


def smoothed(values, window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# --- checkpoints -------------------------------------------------------------

_CRC64_POLY = 0xC96C5795D7870F42  # CRC-64/XZ (ECMA-182, reflected)
_CRC64_TABLE = []
for _i in range(256):
    _c = _i
    for _ in range(8):
        _c = (_c >> 1) ^ _CRC64_POLY if _c & 1 else _c >> 1
    _CRC64_TABLE.append(_c)


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    table = _CRC64_TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def save_checkpoint(model: torch.nn.Module, path) -> None:
    """Magic, record count, then (name, dims, float32 data) per tensor; trailing CRC-64 of the payload."""
    items = list(model.state_dict().items())
    chunks = [struct.pack("<Q", len(items))]
    for name, t in items:
        nb = name.encode()
        chunks.append(struct.pack("<Q", len(nb)) + nb + struct.pack("<Q", t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}Q", *t.shape))
        chunks.append(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    payload = b"".join(chunks)
    Path(path).write_bytes(MAGIC + payload + struct.pack("<Q", crc64(payload)))


def read_checkpoint(path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an IUPPOSE1 checkpoint")
    payload, (crc,) = data[8:-8], struct.unpack("<Q", data[-8:])
    if crc64(payload) != crc:
        raise ValueError(f"{path}: checksum mismatch")
    (count,), pos = struct.unpack_from("<Q", payload), 8
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        name = payload[pos : pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", payload, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = torch.from_numpy(arr.copy())
    return out


def load_checkpoint(model: torch.nn.Module, path) -> torch.nn.Module:
    state = read_checkpoint(path)
    dtype = next(model.parameters()).dtype
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return model
