"""Shared test utilities: finite-difference gradient check and toy datasets."""

import time

import numpy as np
import torch

from microdiff.denoiser import Architecture, DenoiserModel, noise_prediction_loss, train
from microdiff.diffusion import from_phase
from microdiff.schedule import linear_schedule
from microdiff.synth import GenSpec, generate_dataset

TOY_SPEC = GenSpec(kind="inclusions", shape=(32, 32), target_fraction=0.3, radius_range=(2.5, 4.0))
TOY_TRAIN = dict(steps=3000, batch_size=16, lr=1e-3, ema_decay=0.999, seed=0)


def fd_gradient_error(arch: Architecture, shape, seed: int, n_params: int = 20, h: float = 1e-4) -> float:
    """Largest relative error between autograd and central differences over random parameters.

    Runs in float64 with a randomised output layer so every parameter has a gradient.
    """
    rng = np.random.default_rng(seed)
    m = DenoiserModel(arch, seed=seed, dtype=torch.float64)
    with torch.no_grad():
        gen = torch.Generator().manual_seed(seed)
        m.net.conv_out.weight.copy_(0.3 * torch.randn(m.net.conv_out.weight.shape, generator=gen))
        m.net.conv_out.bias.fill_(0.1)
    s = linear_schedule()
    x0 = rng.choice([-1.0, 1.0], size=shape)
    t = rng.integers(1, s.T + 1, shape[0])
    eps = rng.standard_normal(shape)
    labels = rng.integers(0, arch.num_labels, shape[0]) if arch.num_labels else None

    def loss():
        return noise_prediction_loss(m, x0, t, eps, labels, s)

    m.net.zero_grad()
    loss().backward()
    params = list(m.net.parameters())
    offsets = np.concatenate([[0], np.cumsum([p.numel() for p in params])])
    errs = []
    for k in rng.choice(offsets[-1], n_params, replace=False):
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        j = int(k - offsets[i])
        flat = params[i].data.view(-1)
        g = params[i].grad.view(-1)[j].item()
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = loss().item()
            flat[j] = old - h
            dn = loss().item()
            flat[j] = old
        fd = (up - dn) / (2 * h)
        errs.append(abs(g - fd) / max(abs(g), abs(fd), 1e-7))
    return max(errs)


def toy_dataset(spec: GenSpec = TOY_SPEC, count: int = 500, seed: int = 1):
    structures, _ = generate_dataset(spec, count, seed=seed)
    return structures, np.stack([from_phase(m.phase) for m in structures])


def train_toy(data, labels=None, num_labels: int = 0, label_dropout: float = 0.0, **overrides):
    """Train the desk-scale U-Net with the acceptance settings; returns (model, losses, seconds)."""
    kw = {**TOY_TRAIN, **overrides}
    model = DenoiserModel(Architecture(base_channels=16, num_labels=num_labels), seed=0,
                          sample_shape=data.shape[1:])
    t0 = time.time()
    losses = train(model, data, linear_schedule(), kw.pop("steps"), labels=labels,
                   label_dropout=label_dropout, **kw)
    return model, losses, time.time() - t0
