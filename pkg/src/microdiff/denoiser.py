"""Noise predictors: an exact Gaussian-prior oracle and a small trainable U-Net.

The U-Net follows the usual diffusion layout (residual blocks with GroupNorm,
SiLU and time-embedding injection, skip connections by concatenation, nearest
upsampling) at a desk-friendly width of [C, 2C, 4C]. It works on 2-D images or
3-D volumes. Labels are embedded and added to the time embedding; the last
label index is reserved as the null label used for classifier-free guidance.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DivergenceError, ValidationError
from .schedule import NoiseSchedule

_MAX_PERIOD = 10000.0


# --------------------------------------------------------------------------- oracle


def gaussian_oracle_eps(x_t, t: int, mu0: float, var0: float, s: NoiseSchedule) -> np.ndarray:
    """Exact MMSE noise prediction when every cell of x_0 is iid N(mu0, var0)."""
    if var0 < 0:
        raise ValidationError("var0 must be >= 0")
    ab = s.alpha_bar_at(s._check_t(t))
    if 1.0 - ab <= 0.0:
        raise ValidationError("no noise to predict at this step (1 - alpha_bar = 0)")
    x_t = np.asarray(x_t, dtype=np.float64)
    post_mean = (np.sqrt(ab) * var0 * x_t + (1.0 - ab) * mu0) / (ab * var0 + 1.0 - ab)
    return (x_t - np.sqrt(ab) * post_mean) / np.sqrt(1.0 - ab)


class GaussianOracle:
    """Callable noise predictor wrapping :func:`gaussian_oracle_eps`."""

    def __init__(self, mu0: float, var0: float, s: NoiseSchedule):
        self.mu0 = mu0
        self.var0 = var0
        self.schedule = s

    def __call__(self, x_t, t, label=None):
        return gaussian_oracle_eps(x_t, t, self.mu0, self.var0, self.schedule)


# --------------------------------------------------------------------------- embeddings


def _frequencies(dim: int) -> np.ndarray:
    half = dim // 2
    return np.exp(-math.log(_MAX_PERIOD) * np.arange(half, dtype=np.float64) / half)


def time_embedding(t: int, dim: int, T: Optional[int] = None) -> np.ndarray:
    """Sinusoidal embedding: sin(t w_k) for the first half, cos(t w_k) for the second."""
    if dim < 2 or dim % 2:
        raise ValidationError(f"embedding dim must be even and >= 2, got {dim}")
    if t < 0 or (T is not None and not 1 <= t <= T):
        raise ValidationError(f"time step {t} out of range")
    arg = float(t) * _frequencies(dim)
    return np.concatenate([np.sin(arg), np.cos(arg)])


def _time_embedding_torch(t: torch.Tensor, dim: int) -> torch.Tensor:
    dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
    freqs = torch.as_tensor(_frequencies(dim), dtype=dtype)
    arg = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


# --------------------------------------------------------------------------- network


@dataclass(frozen=True)
class Architecture:
    dims: int = 2
    base_channels: int = 16
    channel_mult: tuple = (1, 2, 4)
    num_res_blocks: int = 2
    emb_dim: int = 64
    num_labels: int = 0  # includes the null label; 0 = unconditional network
    attention: bool = False
    max_groups: int = 8

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValidationError("dims must be 2 or 3")
        if self.base_channels < 1 or self.num_res_blocks < 1 or not self.channel_mult:
            raise ValidationError("invalid architecture widths")
        if self.emb_dim < 2 or self.emb_dim % 2:
            raise ValidationError("emb_dim must be even")
        if self.num_labels == 1:
            raise ValidationError("a conditional net needs at least one real label plus the null label")
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))

    @property
    def null_label(self) -> Optional[int]:
        return self.num_labels - 1 if self.num_labels else None

    @property
    def widths(self) -> list:
        return [self.base_channels * m for m in self.channel_mult]

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{k: (tuple(v) if k == "channel_mult" else v) for k, v in d.items()})


def _groups(ch: int, max_groups: int) -> int:
    for g in range(min(max_groups, ch), 0, -1):
        if ch % g == 0:
            return g
    return 1


def _conv(dims, cin, cout, k=3, stride=1):
    cls = nn.Conv2d if dims == 2 else nn.Conv3d
    return cls(cin, cout, k, stride=stride, padding=k // 2)


class ResBlock(nn.Module):
    def __init__(self, dims, cin, cout, emb_dim, max_groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin, max_groups), cin)
        self.conv1 = _conv(dims, cin, cout)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout, max_groups), cout)
        self.conv2 = _conv(dims, cout, cout)
        self.skip = _conv(dims, cin, cout, k=1) if cin != cout else nn.Identity()
        self.dims = dims

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        e = self.emb(F.silu(emb))
        h = h + e.view(*e.shape, *([1] * self.dims))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Attention(nn.Module):
    """Single-head self-attention over all spatial positions."""

    def __init__(self, dims, ch, max_groups):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch, max_groups), ch)
        self.qkv = _conv(dims, ch, 3 * ch, k=1)
        self.proj = _conv(dims, ch, ch, k=1)

    def forward(self, x):
        b, c = x.shape[:2]
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, -1).unbind(1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        h = torch.einsum("bij,bcj->bci", w, v).reshape(x.shape)
        return x + self.proj(h)


class UNet(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        d, E, G = arch.dims, arch.emb_dim, arch.max_groups
        widths = arch.widths
        self.time_mlp = nn.Sequential(nn.Linear(E, E), nn.SiLU(), nn.Linear(E, E))
        self.label_emb = nn.Embedding(arch.num_labels, E) if arch.num_labels else None
        self.conv_in = _conv(d, 1, widths[0])

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        cur = widths[0]
        for i, ch in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(arch.num_res_blocks):
                blocks.append(ResBlock(d, cur, ch, E, G))
                cur = ch
            self.down.append(blocks)
            if i < len(widths) - 1:
                self.downsample.append(_conv(d, ch, ch, stride=2))

        self.mid1 = ResBlock(d, cur, cur, E, G)
        self.mid_attn = Attention(d, cur, G) if arch.attention else None
        self.mid2 = ResBlock(d, cur, cur, E, G)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            ch = widths[i]
            if i < len(widths) - 1:
                self.upsample.append(_conv(d, cur, cur))
            blocks = nn.ModuleList()
            for j in range(arch.num_res_blocks):
                blocks.append(ResBlock(d, cur + ch if j == 0 else ch, ch, E, G))
                cur = ch
            self.up.append(blocks)

        self.norm_out = nn.GroupNorm(_groups(cur, G), cur)
        self.conv_out = _conv(d, cur, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
                bound = 1.0 / math.sqrt(m.weight[0].numel())
                nn.init.uniform_(m.weight, -bound, bound)
                nn.init.uniform_(m.bias, -bound, bound)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=1.0)
        # zero output layer: an untrained net predicts eps_hat = 0
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t, labels=None):
        emb = self.time_mlp(_time_embedding_torch(t, self.arch.emb_dim))
        if self.label_emb is not None:
            if labels is None:
                labels = torch.full((x.shape[0],), self.arch.null_label, dtype=torch.long)
            emb = emb + self.label_emb(labels)
        h = self.conv_in(x)
        skips = []
        for i, blocks in enumerate(self.down):
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, emb)
        for k, blocks in enumerate(self.up):
            if k > 0:
                h = self.upsample[k - 1](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips.pop()], dim=1)
            for blk in blocks:
                h = blk(h, emb)
        return self.conv_out(F.silu(self.norm_out(h)))


def analytic_param_count(arch: Architecture) -> int:
    """Parameter count of :class:`UNet` computed from the architecture alone."""
    k3 = 3 ** arch.dims
    E, G = arch.emb_dim, arch.max_groups

    def conv(cin, cout, k=k3):
        return cin * cout * k + cout

    def res(cin, cout):
        n = 2 * cin + conv(cin, cout) + (E * cout + cout) + 2 * cout + conv(cout, cout)
        return n + (conv(cin, cout, 1) if cin != cout else 0)

    widths = arch.widths
    n = 2 * (E * E + E) + arch.num_labels * E + conv(1, widths[0])
    cur = widths[0]
    for i, ch in enumerate(widths):
        for _ in range(arch.num_res_blocks):
            n += res(cur, ch)
            cur = ch
        if i < len(widths) - 1:
            n += conv(ch, ch)
    n += 2 * res(cur, cur)
    if arch.attention:
        n += 2 * cur + conv(cur, 3 * cur, 1) + conv(cur, cur, 1)
    for i in reversed(range(len(widths))):
        ch = widths[i]
        if i < len(widths) - 1:
            n += conv(cur, cur)
        for j in range(arch.num_res_blocks):
            n += res(cur + ch if j == 0 else ch, ch)
            cur = ch
    n += 2 * cur + conv(cur, 1)
    return n


# --------------------------------------------------------------------------- model wrapper


@dataclass
class TrainBatch:
    """Clean samples in [-1, 1] with shape (B, *spatial) and optional integer labels."""

    x0: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.x0.ndim < 3 or self.x0.shape[0] == 0:
            raise ValidationError("batch must be non-empty with shape (B, *spatial)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.x0.shape[0],):
                raise ValidationError("labels must have one entry per item")


class DenoiserModel:
    """A :class:`UNet` plus the numpy-facing noise-predictor interface.

    Calling the model (or :meth:`predict_eps`) accepts a single field of shape
    ``spatial`` or a batch ``(B, *spatial)``; ``label=None`` means the null label.
    """

    def __init__(self, arch: Architecture, seed: int = 0, dtype=torch.float32,
                 sample_shape: Optional[Sequence[int]] = None):
        self.arch = arch
        self.dtype = dtype
        self.sample_shape = None if sample_shape is None else tuple(int(n) for n in sample_shape)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.net = UNet(arch).to(dtype)
        torch.random.set_rng_state(gen_state)

    # -- parameters
    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def flat_parameters(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.net.parameters()).detach().cpu().double().numpy()

    def set_flat_parameters(self, vec: np.ndarray) -> None:
        if vec.size != self.num_parameters:
            raise ValidationError(f"expected {self.num_parameters} parameters, got {vec.size}")
        nn.utils.vector_to_parameters(torch.as_tensor(vec, dtype=self.dtype), self.net.parameters())

    # -- input plumbing
    def _check_spatial(self, spatial):
        if len(spatial) != self.arch.dims:
            raise ValidationError(f"expected {self.arch.dims}-D fields, got spatial shape {spatial}")
        f = self.arch.downsample_factor
        if any(n % f for n in spatial):
            raise ValidationError(f"spatial extents {spatial} must be divisible by {f}")

    def _labels_tensor(self, label, batch: int) -> Optional[torch.Tensor]:
        if self.arch.num_labels == 0:
            if label is not None:
                raise ValidationError("unconditional model got a label")
            return None
        if label is None:
            label = self.arch.null_label
        lab = np.broadcast_to(np.asarray(label, dtype=np.int64), (batch,))
        if np.any(lab < 0) or np.any(lab >= self.arch.num_labels):
            raise ValidationError(f"label out of range 0..{self.arch.num_labels - 1}")
        return torch.as_tensor(np.array(lab))

    def forward_tensor(self, x: torch.Tensor, t: torch.Tensor, labels: Optional[torch.Tensor]):
        return self.net(x.unsqueeze(1), t, labels).squeeze(1)

    def predict_eps(self, x_t, t: int, label=None) -> np.ndarray:
        x = np.asarray(x_t)
        single = x.ndim == self.arch.dims
        if single:
            x = x[None]
        self._check_spatial(x.shape[1:])
        labels = self._labels_tensor(label, x.shape[0])
        tt = torch.full((x.shape[0],), float(t), dtype=self.dtype)
        self.net.eval()
        with torch.no_grad():
            out = self.forward_tensor(torch.as_tensor(x, dtype=self.dtype), tt, labels)
        out = out.double().numpy()
        return out[0] if single else out

    __call__ = predict_eps


# --------------------------------------------------------------------------- training


def noise_prediction_loss(model: DenoiserModel, x0, t, eps, labels, s: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between eps and eps_theta(sqrt(abar) x0 + sqrt(1 - abar) eps, t, y).

    ``t`` is an integer array of 1-based steps, one per item.
    """
    dt = model.dtype
    x0 = torch.as_tensor(x0, dtype=dt)
    eps = torch.as_tensor(eps, dtype=dt)
    t = np.asarray(t, dtype=np.int64)
    ab = torch.as_tensor(s.alpha_bar[t - 1], dtype=dt).view(-1, *([1] * (x0.ndim - 1)))
    x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    lab = None if labels is None else torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if lab is None and model.arch.num_labels:
        lab = model._labels_tensor(None, x0.shape[0])
    pred = model.forward_tensor(x_t, torch.as_tensor(t, dtype=dt), lab)
    return F.mse_loss(pred, eps)


def apply_label_dropout(labels, null_label: int, p: float, rng: np.random.Generator) -> np.ndarray:
    labels = np.array(labels, dtype=np.int64, copy=True)
    labels[rng.random(labels.shape[0]) < p] = null_label
    return labels


def make_optimizer(model: DenoiserModel, kind: str = "adam", lr: float = 1e-3):
    if kind == "sgd":
        return torch.optim.SGD(model.net.parameters(), lr=lr)
    if kind == "adam":
        return torch.optim.Adam(model.net.parameters(), lr=lr)
    raise ValidationError(f"unknown optimizer {kind!r}")


def train_step(model: DenoiserModel, batch: TrainBatch, s: NoiseSchedule, rng: np.random.Generator,
               label_dropout: float = 0.0, lr: float = 1e-3, optimizer=None):
    """One stochastic gradient update on the simplified noise-prediction loss.

    Draws t ~ U{1..T} and eps ~ N(0, I) per item from ``rng``. Without an
    ``optimizer`` a plain SGD step with learning rate ``lr`` is applied.
    Returns ``(model, loss)``; the model is updated in place.
    """
    if not 0.0 <= label_dropout <= 1.0:
        raise ValidationError("label_dropout must be in [0, 1]")
    B = batch.x0.shape[0]
    t = rng.integers(1, s.T + 1, size=B)
    eps = rng.standard_normal(batch.x0.shape)
    labels = batch.labels
    if model.arch.num_labels:
        if labels is None:
            labels = np.full(B, model.arch.null_label)
        elif label_dropout > 0:
            labels = apply_label_dropout(labels, model.arch.null_label, label_dropout, rng)
    elif labels is not None:
        raise ValidationError("unconditional model got labels")

    model.net.train()
    loss = noise_prediction_loss(model, batch.x0, t, eps, labels, s)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss ({value})")
    model.net.zero_grad(set_to_none=True)
    loss.backward()
    if optimizer is None:
        with torch.no_grad():
            for p in model.net.parameters():
                if p.grad is not None:
                    p.add_(p.grad, alpha=-lr)
    else:
        optimizer.step()
    return model, value


def train(model: DenoiserModel, data: np.ndarray, s: NoiseSchedule, steps: int, batch_size: int = 32,
          lr: float = 1e-3, seed: int = 0, labels: Optional[np.ndarray] = None,
          label_dropout: float = 0.0, optimizer: str = "adam", ema_decay: float = 0.0,
          callback=None) -> list:
    """Minibatch training loop; returns the per-step losses.

    With ``ema_decay > 0`` an exponential moving average of the weights is
    tracked and copied into the model when training ends. The averaged weights
    give a much less biased noise prediction at large t than the last iterate.
    """
    data = np.asarray(data)
    if data.shape[0] == 0:
        raise ValidationError("empty training set")
    rng = np.random.default_rng(seed)
    if not 0.0 <= ema_decay < 1.0:
        raise ValidationError("ema_decay must be in [0, 1)")
    opt = make_optimizer(model, optimizer, lr)
    params = list(model.net.parameters())
    shadow = [p.detach().clone() for p in params] if ema_decay > 0 else None
    losses = []
    for step in range(steps):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        batch = TrainBatch(data[idx], None if labels is None else labels[idx])
        _, loss = train_step(model, batch, s, rng, label_dropout=label_dropout, optimizer=opt)
        losses.append(loss)
        if shadow is not None:
            # warm-up so early averages are not dominated by the initial weights
            d = min(ema_decay, (1.0 + step) / (10.0 + step))
            with torch.no_grad():
                torch._foreach_lerp_(shadow, [p.detach() for p in params], 1.0 - d)
        if callback is not None:
            callback(step, loss)
    if shadow is not None:
        with torch.no_grad():
            for p, q in zip(params, shadow):
                p.copy_(q)
    return losses


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"MDCK"


def save_checkpoint(path, model: DenoiserModel, schedule: Optional[dict] = None, seed: int = 0,
                    step: int = 0, extra: Optional[dict] = None) -> None:
    """Write ``MDCK`` + u32 header length + JSON header + little-endian float32 parameters."""
    params = [(name, p.detach().cpu().numpy()) for name, p in model.net.named_parameters()]
    header = {
        "architecture": model.arch.to_dict(),
        "schedule": schedule,
        "seed": seed,
        "step": step,
        "param_count": int(sum(a.size for _, a in params)),
        "sample_shape": None if model.sample_shape is None else list(model.sample_shape),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in params],
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    payload = np.concatenate([a.ravel() for _, a in params]).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(blob)) + blob + payload)


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, header)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    arch = Architecture.from_dict(header["architecture"])
    model = DenoiserModel(arch, sample_shape=header.get("sample_shape"))
    payload = np.frombuffer(raw[8 + n:], dtype="<f4")
    if payload.size != header["param_count"] or payload.size != model.num_parameters:
        raise ValidationError(f"{path}: parameter payload does not match architecture")
    model.set_flat_parameters(payload.astype(np.float32))
    return model, header
