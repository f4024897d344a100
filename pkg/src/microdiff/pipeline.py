"""End-to-end runs: generate -> train -> sample -> descriptors -> permeability.

Also hosts the sampling-side commands (sample, latent interpolation, eta sweep)
that the CLI wraps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .denoiser import Architecture, DenoiserModel, load_checkpoint, save_checkpoint, train
from .descriptors import (Microstructure, curve_gap, lineal_path, mean_curve, two_point_correlation,
                          volume_fraction)
from .diffusion import SamplerConfig, denoise, draw_latent, from_phase, make_step_sequence, sample_loop, slerp, to_phase
from .errors import ValidationError
from .io import write_json, write_microstructure
from .lbm import classify_permeability, permeability
from .schedule import NoiseSchedule, linear_schedule
from .synth import GenSpec, generate_dataset, grid_hash

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- config


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule_kind: str = "linear"

    def build(self) -> NoiseSchedule:
        return NoiseSchedule.from_config(asdict(self))


@dataclass
class DatasetConfig:
    kind: str = "inclusions"
    count: int = 500
    shape: tuple = (32, 32)
    target_fraction: float = 0.3
    seed: int = 0
    periodic: bool = True
    params: dict = field(default_factory=dict)  # extra GenSpec fields
    label_fractions: Optional[list] = None  # one class per entry, count samples each

    def spec(self, fraction: Optional[float] = None) -> GenSpec:
        return GenSpec(kind=self.kind, shape=tuple(self.shape), seed=self.seed, periodic=self.periodic,
                       target_fraction=self.target_fraction if fraction is None else fraction, **self.params)


@dataclass
class ModelConfig:
    base_channels: int = 16
    channel_mult: tuple = (1, 2, 4)
    num_res_blocks: int = 2
    emb_dim: int = 64
    attention: bool = False
    seed: int = 0


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    ema_decay: float = 0.999
    label_dropout: float = 0.1
    seed: int = 0


@dataclass
class SampleConfig:
    n_samples: int = 64
    steps: int = 50
    eta: float = 0.0
    guidance_weight: float = 0.0
    seed: int = 1234
    label: Optional[int] = None
    clip_denoised: bool = False
    baseline: bool = True  # also sample the untrained network for comparison


@dataclass
class EvalConfig:
    r_max: int = 10


@dataclass
class PermeabilityConfig:
    enabled: bool = False
    axis: int = 0
    tau: float = 1.0
    drive: float = 1e-5
    walls: bool = False
    pore_phase: int = 0  # phase value that is open pore space
    tol: float = 1e-6
    max_steps: int = 20000


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    sampler: SampleConfig = field(default_factory=SampleConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    permeability: PermeabilityConfig = field(default_factory=PermeabilityConfig)
    out_dir: str = "run"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def conditional(self) -> bool:
        return bool(self.dataset.label_fractions)

    def architecture(self) -> Architecture:
        m = self.model
        n_labels = len(self.dataset.label_fractions) + 1 if self.conditional else 0
        return Architecture(dims=len(self.dataset.shape), base_channels=m.base_channels,
                            channel_mult=tuple(m.channel_mult), num_res_blocks=m.num_res_blocks,
                            emb_dim=m.emb_dim, num_labels=n_labels, attention=m.attention)

    def validate(self) -> None:
        """Check every stage's preconditions before anything runs or is written."""
        s = self.schedule.build()
        ds = self.dataset
        if ds.count < 1:
            raise ValidationError("dataset.count must be >= 1")
        for frac in (ds.label_fractions or [ds.target_fraction]):
            ds.spec(frac)
        arch = self.architecture()
        f = arch.downsample_factor
        if any(n % f for n in ds.shape):
            raise ValidationError(f"dataset shape {tuple(ds.shape)} must be divisible by {f}")
        tr = self.training
        if tr.steps < 0 or tr.batch_size < 1 or tr.lr <= 0:
            raise ValidationError("training needs steps >= 0, batch_size >= 1, lr > 0")
        if not 0.0 <= tr.label_dropout <= 1.0:
            raise ValidationError("label_dropout must be in [0, 1]")
        if tr.optimizer not in ("adam", "sgd"):
            raise ValidationError("optimizer must be 'adam' or 'sgd'")
        if not 0.0 <= tr.ema_decay < 1.0:
            raise ValidationError("ema_decay must be in [0, 1)")
        sp = self.sampler
        if sp.n_samples < 0:
            raise ValidationError("sampler.n_samples must be >= 0")
        SamplerConfig.from_steps(s, sp.steps, eta=sp.eta, guidance_weight=sp.guidance_weight).validate(s)
        if sp.label is not None and not (self.conditional and 0 <= sp.label < len(ds.label_fractions)):
            raise ValidationError("sampler.label needs a conditional dataset with that class")
        if not 0 <= self.evaluation.r_max < min(ds.shape):
            raise ValidationError("evaluation.r_max must be below the smallest extent")
        pm = self.permeability
        if pm.enabled and (pm.tau <= 0.5 or pm.drive <= 0 or not 0 <= pm.axis < len(ds.shape)):
            raise ValidationError("invalid permeability settings")


def _from_dict(cls, d):
    if not isinstance(d, dict):
        raise ValidationError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        factory = known[name].default_factory
        default = factory() if factory is not MISSING else None
        if is_dataclass(default):
            kw[name] = _from_dict(type(default), value)
        else:
            kw[name] = tuple(value) if name in ("shape", "channel_mult") else value
    return cls(**kw)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- sampling commands


def sample_fields(model, s: NoiseSchedule, seed: int, n: int, n_steps: int = 50, eta: float = 0.0,
                  guidance_weight: float = 0.0, label=None, clip_denoised: bool = False) -> np.ndarray:
    """``n`` continuous samples (n, *spatial) from one seed."""
    spatial = _spatial_shape(model)
    cfg = SamplerConfig(make_step_sequence(s.T, n_steps), eta=eta, guidance_weight=guidance_weight,
                        seed=seed, clip_denoised=clip_denoised)
    return sample_loop(model, cfg, label, (n, *spatial), s)


def _spatial_shape(model) -> tuple:
    if getattr(model, "sample_shape", None) is None:
        raise ValidationError("model does not record its sample shape")
    return tuple(model.sample_shape)


def cmd_sample(model, s: NoiseSchedule, seed: int, n_steps: int = 50, eta: float = 0.0,
               guidance_weight: float = 0.0, label=None, n: int = 1) -> np.ndarray:
    """Binary samples (n, *spatial)."""
    return to_phase(sample_fields(model, s, seed, n, n_steps, eta, guidance_weight, label))


def cmd_interpolate(model, s: NoiseSchedule, seed0: int, seed1: int, n_frames: int, n_steps: int = 50,
                    eta: float = 0.0, label=None, guidance_weight: float = 0.0, out_dir=None):
    """Decode slerp(z0, z1, k / (n_frames - 1)) for k = 0..n_frames-1.

    Returns ``(frames, strip)`` where ``strip`` tiles the frames along x.
    Frames are decoded one at a time with the same batch shape as
    :func:`cmd_sample`, so the endpoints reproduce it bit for bit.
    """
    if n_frames < 2:
        raise ValidationError("n_frames must be >= 2")
    spatial = _spatial_shape(model)
    shape = (1, *spatial)
    z0 = draw_latent(seed0, shape)
    z1 = draw_latent(seed1, shape)
    frames = []
    for k in range(n_frames):
        alpha = k / (n_frames - 1)
        cfg = SamplerConfig(make_step_sequence(s.T, n_steps), eta=eta, guidance_weight=guidance_weight, seed=seed0)
        rng = np.random.default_rng([seed0, seed1, k]) if eta > 0 else None
        x = denoise(model, slerp(z0, z1, alpha), cfg, s, cond=label, rng=rng)
        frames.append(to_phase(x)[0])
    strip = np.concatenate(frames, axis=-1)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k, fr in enumerate(frames):
            write_microstructure(out / f"frame_{k:03d}", fr)
        write_microstructure(out / "strip", strip)
    return frames, strip


def eta_sweep(model, s: NoiseSchedule, seed: int, etas, n_steps: int = 50, label=None,
              guidance_weight: float = 0.0):
    """One sample per eta from a shared latent; returns ``(images, hamming)``.

    ``hamming[i]`` is the fraction of cells that differ from the eta = 0 reference.
    """
    etas = [float(e) for e in etas]
    if not etas or any(not 0.0 <= e <= 1.0 for e in etas):
        raise ValidationError("etas must be a non-empty subset of [0, 1]")
    ref = cmd_sample(model, s, seed, n_steps, 0.0, guidance_weight, label)[0]
    images, dist = [], []
    for e in etas:
        img = ref if e == 0.0 else cmd_sample(model, s, seed, n_steps, e, guidance_weight, label)[0]
        images.append(img)
        dist.append(float(np.mean(img != ref)))
    return images, dist


def cmd_eta_sweep(model, s: NoiseSchedule, seed: int, etas, n_steps: int = 50, label=None,
                  guidance_weight: float = 0.0, out_dir=None) -> dict:
    images, dist = eta_sweep(model, s, seed, etas, n_steps, label, guidance_weight)
    report = {"seed": seed, "etas": [float(e) for e in etas], "hamming": dist}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for e, img in zip(etas, images):
            write_microstructure(out / f"eta_{float(e):.2f}", img)
        write_json(out / "eta_sweep.json", report)
    report["images"] = images
    return report


def load_model(path):
    """Load a checkpoint and attach its sample shape and schedule."""
    model, header = load_checkpoint(path)
    if model.sample_shape is None:
        raise ValidationError(f"{path}: checkpoint has no sample_shape")
    sched = header.get("schedule") or asdict(ScheduleConfig())
    return model, NoiseSchedule.from_config(sched), header


# --------------------------------------------------------------------------- pipeline


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def _population_metrics(gen, ref, r_max: int) -> dict:
    s2_g = mean_curve([two_point_correlation(m, r_max) for m in gen])
    s2_r = mean_curve([two_point_correlation(m, r_max) for m in ref])
    l_g = mean_curve([lineal_path(m, r_max) for m in gen])
    l_r = mean_curve([lineal_path(m, r_max) for m in ref])
    return {
        "phi_generated": float(np.mean([volume_fraction(m) for m in gen])),
        "phi_reference": float(np.mean([volume_fraction(m) for m in ref])),
        "s2_gap": curve_gap(s2_g, s2_r),
        "lineal_gap": curve_gap(l_g, l_r),
        "s2_generated": s2_g.value.tolist(),
        "s2_reference": s2_r.value.tolist(),
    }


def build_dataset(cfg: RunConfig):
    """Structures, continuous training array in [-1, 1], labels (or None), seeds."""
    ds = cfg.dataset
    if cfg.conditional:
        structures, labels, seeds = [], [], []
        for k, frac in enumerate(ds.label_fractions):
            ms, sd = generate_dataset(ds.spec(frac), ds.count, seed=int(ds.seed) * 1000 + k)
            structures += ms
            seeds += sd
            labels += [k] * len(ms)
        labels = np.asarray(labels)
    else:
        structures, seeds = generate_dataset(ds.spec(), ds.count)
        labels = None
    data = np.stack([from_phase(m.phase) for m in structures])
    return structures, data, labels, seeds


def cmd_pipeline(cfg: RunConfig, write: bool = True) -> dict:
    """Run every stage and return (and write) the JSON report."""
    cfg.validate()
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    s = cfg.schedule.build()
    report = {"version": __version__, "config": cfg.to_dict(), "config_hash": cfg.hash(), "stages": {}}

    def stage(name):
        class _Stage:
            def __enter__(self_):
                self_.t0 = time.time()
                log.info("stage %s", name)

            def __exit__(self_, et, ev, tb):
                report["stages"][name] = {"seconds": round(time.time() - self_.t0, 3), "ok": et is None}
                if et is not None and not isinstance(ev, StageError):
                    if write:
                        write_json(out / "report.json", report)
                    raise StageError(name, ev) from ev
        return _Stage()

    with stage("generate"):
        structures, data, labels, seeds = build_dataset(cfg)
        report["dataset"] = {"count": len(structures), "hashes_unique": len({grid_hash(m.phase) for m in structures}),
                             "phi": float(np.mean([volume_fraction(m) for m in structures]))}
        if write:
            d = out / "dataset"
            d.mkdir(exist_ok=True)
            for i, m in enumerate(structures):
                write_microstructure(d / f"sample_{i:05d}", m.phase)
            write_json(d / "manifest.json", {"seeds": seeds, "labels": None if labels is None else labels.tolist(),
                                             "spec": cfg.dataset.spec().to_dict()})

    with stage("train"):
        model = DenoiserModel(cfg.architecture(), seed=cfg.model.seed, sample_shape=cfg.dataset.shape)
        untrained = DenoiserModel(cfg.architecture(), seed=cfg.model.seed, sample_shape=cfg.dataset.shape)
        tr = cfg.training
        losses = train(model, data, s, tr.steps, batch_size=tr.batch_size, lr=tr.lr, seed=tr.seed,
                       labels=labels, label_dropout=tr.label_dropout if labels is not None else 0.0,
                       optimizer=tr.optimizer, ema_decay=tr.ema_decay)
        stride = max(1, len(losses) // 200)
        report["training"] = {
            "steps": len(losses),
            "loss_first": losses[0] if losses else None,
            "loss_final_mean": float(np.mean(losses[-100:])) if losses else None,
            "loss_curve": losses[::stride],
        }
        if write:
            save_checkpoint(out / "model.ckpt", model, schedule=asdict(cfg.schedule), seed=cfg.model.seed,
                            step=len(losses))

    sp = cfg.sampler
    if sp.n_samples == 0:
        if write:
            write_json(out / "report.json", report)
        return report

    groups = [(None, structures)]
    if cfg.conditional:
        wanted = range(len(cfg.dataset.label_fractions)) if sp.label is None else [sp.label]
        groups = [(k, [m for m, lab in zip(structures, labels) if lab == k]) for k in wanted]

    generated = {}
    with stage("sample"):
        report["samples"] = {}
        for lab, _ in groups:
            x = sample_fields(model, s, sp.seed, sp.n_samples, sp.steps, sp.eta, sp.guidance_weight, lab,
                              sp.clip_denoised)
            phases = to_phase(x)
            key = "all" if lab is None else f"label_{lab}"
            generated[key] = [Microstructure(p, cfg.dataset.periodic) for p in phases]
            report["samples"][key] = {"hashes": [grid_hash(p) for p in phases]}
            if write:
                d = out / "samples" / key
                d.mkdir(parents=True, exist_ok=True)
                for i, p in enumerate(phases):
                    write_microstructure(d / f"sample_{i:05d}", p)

    with stage("descriptors"):
        r_max = cfg.evaluation.r_max
        report["descriptors"] = {}
        for lab, ref in groups:
            key = "all" if lab is None else f"label_{lab}"
            metrics = _population_metrics(generated[key], ref, r_max)
            if sp.baseline:
                base = to_phase(sample_fields(untrained, s, sp.seed, sp.n_samples, sp.steps, sp.eta,
                                              sp.guidance_weight, lab, sp.clip_denoised))
                base_ms = [Microstructure(p, cfg.dataset.periodic) for p in base]
                bm = _population_metrics(base_ms, ref, r_max)
                metrics["baseline_s2_gap"] = bm["s2_gap"]
                metrics["baseline_lineal_gap"] = bm["lineal_gap"]
            report["descriptors"][key] = metrics

    pm = cfg.permeability
    if pm.enabled:
        with stage("permeability"):
            report["permeability"] = {}
            for key, ms_list in generated.items():
                rows = []
                for m in ms_list:
                    kappa, st = permeability(m.phase != pm.pore_phase, axis=pm.axis, tau=pm.tau, drive=pm.drive,
                                             walls=pm.walls, tol=pm.tol, max_steps=pm.max_steps)
                    rows.append({"kappa": kappa, "class": classify_permeability(max(kappa, 0.0)).index,
                                 "steps": st.steps, "converged": bool(st.converged)})
                report["permeability"][key] = rows

    if write:
        write_json(out / "report.json", report)
    return report
