"""Command-line entry point: ``microdiff <subcommand> [options]``.

Every subcommand accepts ``--config FILE.json``; keys in that file (named like
the long options, with dashes or underscores) override the flags. Inputs are
validated before anything is written. Exit codes: 0 success, 2 invalid input,
3 numerical divergence, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .contour import descriptor_population_stats, fourier_descriptor, magnitude_histogram, trace_boundaries
from .denoiser import Architecture, DenoiserModel, save_checkpoint, train
from .descriptors import Microstructure, lineal_path, mean_curve, two_point_correlation, volume_fraction
from .diffusion import from_phase
from .errors import DivergenceError, NonConvergenceError, ValidationError
from .io import (list_microstructures, read_microstructure, write_curves_csv, write_field, write_json,
                 write_microstructure)
from .lbm import classify_permeability, darcy_permeability, macroscopic, make_state, run_to_steady
from .pipeline import (DatasetConfig, ScheduleConfig, StageError, build_dataset, cmd_eta_sweep, cmd_interpolate,
                       cmd_pipeline, cmd_sample, load_config, load_model)
from .synth import GenSpec, grid_hash

log = logging.getLogger("microdiff")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace("x", ",").split(",") if v)


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v]


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    if not getattr(args, "config", None) or args.command == "pipeline":
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("command", "config") or not hasattr(args, dest):
            raise ValidationError(f"unknown option {key!r} for {args.command}")
        setattr(args, dest, value)
    return args


def _load_inputs(path, periodic: bool) -> list:
    p = Path(path)
    files = list_microstructures(p) if p.is_dir() else [p]
    return [(f, read_microstructure(f, periodic)) for f in files]


# --------------------------------------------------------------------------- subcommands


def run_generate(a) -> int:
    ds = DatasetConfig(kind=a.kind, count=int(a.count), shape=tuple(a.shape), target_fraction=float(a.fraction),
                       seed=int(a.seed), periodic=not a.non_periodic, params=dict(a.params or {}),
                       label_fractions=a.label_fractions)
    if ds.count < 1:
        raise ValidationError("count must be >= 1")
    for frac in (ds.label_fractions or [ds.target_fraction]):
        ds.spec(frac)
    from .pipeline import RunConfig
    structures, _, labels, seeds = build_dataset(RunConfig(dataset=ds))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(structures):
        write_microstructure(out / f"sample_{i:05d}", m.phase)
    write_json(out / "manifest.json", {
        "version": __version__, "dataset": asdict(ds), "seeds": seeds,
        "labels": None if labels is None else labels.tolist(),
        "label_fractions": ds.label_fractions,
        "hashes": [grid_hash(m.phase) for m in structures],
        "phi": [volume_fraction(m) for m in structures],
    })
    print(f"wrote {len(structures)} microstructures to {out}")
    return 0


def run_train(a) -> int:
    files = list_microstructures(a.data)
    manifest_path = Path(a.data) / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    labels = manifest.get("labels")
    structures = [read_microstructure(f) for f in files]
    shapes = {m.shape for m in structures}
    if len(shapes) != 1:
        raise ValidationError(f"training data must share one shape, found {sorted(shapes)}")
    shape = shapes.pop()
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(structures),):
            raise ValidationError("manifest labels do not match the number of files")
    n_labels = int(labels.max()) + 2 if labels is not None else 0
    arch = Architecture(dims=len(shape), base_channels=int(a.base_channels), num_res_blocks=int(a.res_blocks),
                        num_labels=n_labels, attention=bool(a.attention))
    sched = ScheduleConfig(T=int(a.T), beta_start=float(a.beta_start), beta_end=float(a.beta_end))
    s = sched.build()
    if any(n % arch.downsample_factor for n in shape):
        raise ValidationError(f"data shape {shape} must be divisible by {arch.downsample_factor}")
    if int(a.steps) < 0 or int(a.batch_size) < 1 or float(a.lr) <= 0:
        raise ValidationError("need steps >= 0, batch-size >= 1, lr > 0")
    model = DenoiserModel(arch, seed=int(a.seed), sample_shape=shape)
    data = np.stack([from_phase(m.phase) for m in structures])
    losses = train(model, data, s, int(a.steps), batch_size=int(a.batch_size), lr=float(a.lr), seed=int(a.seed),
                   labels=labels, label_dropout=float(a.label_dropout) if labels is not None else 0.0,
                   optimizer=a.optimizer, ema_decay=float(a.ema))
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model, schedule=asdict(sched), seed=int(a.seed), step=len(losses),
                    extra={"final_loss": float(np.mean(losses[-100:])) if losses else None})
    write_json(out.with_suffix(".losses.json"), {"losses": losses})
    print(f"trained {len(losses)} steps, checkpoint {out}")
    return 0


def run_sample(a) -> int:
    model, s, _ = load_model(a.ckpt)
    phases = cmd_sample(model, s, int(a.seed), int(a.steps), float(a.eta), float(a.guidance), a.label, int(a.n))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(phases):
        write_microstructure(out / f"sample_{i:05d}", p)
    write_json(out / "samples.json", {"version": __version__, "seed": int(a.seed), "eta": float(a.eta),
                                      "steps": int(a.steps), "guidance": float(a.guidance), "label": a.label,
                                      "hashes": [grid_hash(p) for p in phases]})
    print(f"wrote {len(phases)} samples to {out}")
    return 0


def run_interpolate(a) -> int:
    model, s, _ = load_model(a.ckpt)
    if int(a.frames) < 2:
        raise ValidationError("frames must be >= 2")
    frames, _ = cmd_interpolate(model, s, int(a.seed0), int(a.seed1), int(a.frames), int(a.steps), float(a.eta),
                                a.label, float(a.guidance), out_dir=a.out)
    print(f"wrote {len(frames)} frames and a strip to {a.out}")
    return 0


def run_eta_sweep(a) -> int:
    model, s, _ = load_model(a.ckpt)
    etas = _floats(a.etas) if isinstance(a.etas, str) else [float(e) for e in a.etas]
    if not etas or any(not 0.0 <= e <= 1.0 for e in etas):
        raise ValidationError("etas must lie in [0, 1]")
    rep = cmd_eta_sweep(model, s, int(a.seed), etas, int(a.steps), a.label, float(a.guidance), out_dir=a.out)
    for e, h in zip(rep["etas"], rep["hamming"]):
        print(f"eta={e:.2f} hamming={h:.4f}")
    return 0


def _curves(m: Microstructure, r_max: int):
    s2 = two_point_correlation(m, r_max)
    return s2.r, {"S2": s2.value, "L": lineal_path(m, r_max).value}


def run_descriptors(a) -> int:
    items = _load_inputs(a.input, not a.non_periodic)
    r_max = int(a.r_max)
    if not 0 <= r_max < min(min(m.shape) for _, m in items):
        raise ValidationError("r-max must be below the smallest extent")
    out = Path(a.out)
    if len(items) == 1 and not Path(a.input).is_dir():
        r, cols = _curves(items[0][1], r_max)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_curves_csv(out, r, cols)
    else:
        per = {f: _curves(m, r_max) for f, m in items}
        r = next(iter(per.values()))[0]
        s2 = mean_curve([two_point_correlation(m, r_max) for _, m in items])
        lp = mean_curve([lineal_path(m, r_max) for _, m in items])
        out.parent.mkdir(parents=True, exist_ok=True)
        write_curves_csv(out, r, {"S2": s2.value, "L": lp.value})
        sample_dir = out.with_suffix("")
        sample_dir = sample_dir.parent / (sample_dir.name + "_samples")
        sample_dir.mkdir(exist_ok=True)
        for f, (rr, cols) in per.items():
            write_curves_csv(sample_dir / (Path(f).stem + ".csv"), rr, cols)
    print(f"wrote {out}")
    return 0


def run_fourier(a) -> int:
    items = _load_inputs(a.input, True)
    if any(m.dims != 2 for _, m in items):
        raise ValidationError("Fourier descriptors need 2-D images")
    descs = [fourier_descriptor(c) for _, m in items for c in trace_boundaries(m, int(a.min_length))]
    if not descs:
        raise ValidationError("no boundaries found in the input")
    counts, edges = magnitude_histogram(descs, int(a.bins))
    fit = descriptor_population_stats(descs)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "magnitudes.csv", "w") as fh:
        fh.write("contour,u,magnitude\n")
        for i, d in enumerate(descs):
            for u, v in enumerate(d.magnitudes(), start=1):
                fh.write(f"{i},{u},{v:.12g}\n")
    write_json(out / "stats.json", {
        "contours": len(descs),
        "skew_normal": {"shape": fit.shape, "location": fit.location, "scale": fit.scale,
                        "skewness": fit.skewness},
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
    })
    print(f"{len(descs)} contours; skew-normal shape={fit.shape:.4g} loc={fit.location:.4g} scale={fit.scale:.4g}")
    return 0


def run_permeability(a) -> int:
    if Path(a.input).is_dir():
        raise ValidationError("permeability takes a single microstructure file")
    m = read_microstructure(a.input)
    if int(a.pore_phase) not in (0, 1):
        raise ValidationError("pore-phase must be 0 or 1")
    solid = m.phase != int(a.pore_phase)
    st = make_state(solid, tau=float(a.tau), drive=float(a.drive), axis=int(a.axis), walls=bool(a.walls))
    run_to_steady(st, tol=float(a.tol), max_steps=int(a.max_steps))
    kappa = darcy_permeability(st)
    cls = classify_permeability(max(kappa, 0.0))
    report = {"kappa": kappa, "class": cls.index, "class_range": [cls.low, cls.high], "steps": st.steps,
              "converged": bool(st.converged), "mean_velocity": st.history[-1] if st.history else 0.0,
              "phi_pore": float(np.mean(~solid))}
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    if a.velocity_out:
        _, u = macroscopic(st)
        write_field(a.velocity_out, u[(slice(None),) + st.core], components="array-axis order")
    print(json.dumps(report))
    if not st.converged:
        raise NonConvergenceError(f"no steady state after {st.steps} steps", state=st)
    return 0


def run_pipeline(a) -> int:
    if not a.config:
        raise ValidationError("pipeline needs --config")
    cfg = load_config(a.config)
    if a.out_dir:
        cfg.out_dir = a.out_dir
    rep = cmd_pipeline(cfg)
    print(json.dumps({k: rep[k] for k in ("config_hash", "stages")}))
    for key, d in rep.get("descriptors", {}).items():
        print(f"{key}: s2_gap={d['s2_gap']:.4f} lineal_gap={d['lineal_gap']:.4f}")
    return 0


# --------------------------------------------------------------------------- parser


def _sampler_opts(p):
    p.add_argument("--ckpt", required=False)
    p.add_argument("--steps", type=int, default=50, help="number of sampling steps")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--guidance", type=float, default=0.0, help="classifier-free guidance weight w")
    p.add_argument("--label", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="microdiff", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file whose keys override the flags")
        p.set_defaults(func=fn)
        return p

    p = add("generate-dataset", run_generate, "procedural training data")
    p.add_argument("--kind", default="inclusions")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--shape", type=_ints, default=(32, 32), help="e.g. 32,32 or 32x32x32")
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--non-periodic", action="store_true")
    p.add_argument("--params", type=json.loads, default=None, help="extra generator fields as JSON")
    p.add_argument("--label-fractions", type=_floats, default=None,
                   help="comma list; builds a labelled set with one class per fraction")
    p.add_argument("--out", default="dataset")

    p = add("train", run_train, "train a noise predictor on a dataset directory")
    p.add_argument("--data", default="dataset")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--ema", type=float, default=0.999, help="weight averaging decay (0 disables)")
    p.add_argument("--label-dropout", type=float, default=0.1)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--res-blocks", type=int, default=2)
    p.add_argument("--attention", action="store_true")
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)

    p = add("sample", run_sample, "draw samples from a checkpoint")
    _sampler_opts(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-n", "--n", type=int, default=1)
    p.add_argument("--out", default="samples")

    p = add("interpolate", run_interpolate, "slerp between two seeds' latents")
    _sampler_opts(p)
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--seed1", type=int, default=1)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out", default="interpolation")

    p = add("eta-sweep", run_eta_sweep, "one sample per eta from a shared latent")
    _sampler_opts(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--etas", default="0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--out", default="eta_sweep")

    p = add("descriptors", run_descriptors, "S2 and lineal-path curves")
    p.add_argument("--input", required=False)
    p.add_argument("--r-max", type=int, default=10)
    p.add_argument("--non-periodic", action="store_true")
    p.add_argument("--out", default="curves.csv")

    p = add("fourier", run_fourier, "boundary Fourier descriptors and skew-normal statistics")
    p.add_argument("--input", required=False)
    p.add_argument("--min-length", type=int, default=4)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--out", default="fourier")

    p = add("permeability", run_permeability, "lattice-Boltzmann Darcy permeability")
    p.add_argument("--input", required=False)
    p.add_argument("--axis", type=int, default=0, help="flow along this array axis")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--drive", type=float, default=1e-5)
    p.add_argument("--walls", action="store_true", help="close the non-flow boundaries with solid")
    p.add_argument("--pore-phase", type=int, default=0, help="phase value that is open pore space")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-steps", type=int, default=20000)
    p.add_argument("--velocity-out", default=None)
    p.add_argument("--out", default="permeability.json")

    p = add("pipeline", run_pipeline, "generate -> train -> sample -> descriptors -> permeability")
    p.add_argument("--out-dir", default=None)
    return ap


_REQUIRED = {"sample": ("ckpt",), "interpolate": ("ckpt",), "eta-sweep": ("ckpt",),
             "descriptors": ("input",), "fourier": ("input",), "permeability": ("input",)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config(args, parser)
        missing = [k for k in _REQUIRED.get(args.command, ()) if not getattr(args, k)]
        if missing:
            raise ValidationError(f"{args.command} needs --{missing[0].replace('_', '-')}")
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 1
    except (ValidationError, DivergenceError, NonConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
