"""Command-line entry point.

``hbatlas synth --out DIR``       write a synthetic labelled population
``hbatlas run --config FILE``     build an atlas and write all artifacts
``hbatlas run --config FILE --dry-run``   validate config and dataset only

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.

Outputs of ``run`` (all under the configured output directory):

``atlas.grid``                 scalar atlas image
``atlas_seg.grid``             majority-vote label atlas (labelled datasets)
``velocities.npz``             ``velocities (N,S,d,*lattice)`` complex, ``alphas (N,S)``
``transforms/<name>_phi.grid`` per-subject atlas-to-subject map (vector GridFile)
``history.csv``                ``iteration,q,q_se,q_estep,sigma2,k,beta,velocity_failures,q_drop,``
                               then ``alpha_mean_<n>`` and ``accept_<n>`` per subject
``sharpness.csv``              ``image,w,mean,std,n_patches,n_skipped`` (atlas and intensity mean)
``dice.csv``                   ``subject,label,dice`` plus ``mean`` rows (labelled datasets)
``checkpoints/iter_<i>.npz``   full model state after every EM iteration
``manifest.json``              status, config and every artifact with its sha256
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fourier_field
from .config import ConfigError, RunConfig, load_config
from .fourier_field import FrequencyLattice, LatticeMismatchError, build_operator
from .geodesic import DeformationField, GridMismatchError, shoot
from .gridio import GridFormatError, load_dataset, save_dataset, write_grid
from .mcem import run_mcem
from .metrics import label_atlas, mean_dice, propagate_segmentation, sharpness
from .synthetic import SHAPES, generate_synthetic

log = logging.getLogger("hbatlas")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x):
    return repr(float(x))


class Outputs:
    """Single writer for everything under the output directory."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[Path] = []

    def path(self, rel):
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def manifest(self, status, cfg: RunConfig, error=None, extra=None):
        entries = []
        for p in self.files:
            if p.exists():
                entries.append({"path": p.relative_to(self.root).as_posix(), "sha256": _sha256(p),
                                "bytes": p.stat().st_size})
        doc = {"status": status, "partial": status != "complete", "error": error,
               "config": cfg.source, "artifacts": entries}
        if extra:
            doc.update(extra)
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_history(path, history, N):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "q", "q_se", "q_estep", "sigma2", "k", "beta", "velocity_failures",
                    "q_drop"] + [f"alpha_mean_{n}" for n in range(N)] + [f"accept_{n}" for n in range(N)])
        for r in history:
            w.writerow([r.iteration, _fmt(r.q), _fmt(r.q_se), _fmt(r.q_estep), _fmt(r.sigma2),
                        _fmt(r.k), _fmt(r.beta), r.velocity_failures, int(r.q_drop)]
                       + [_fmt(a) for a in r.alpha_mean] + [_fmt(a) for a in r.accept])


def _lattice(cfg: RunConfig, dims):
    try:
        return FrequencyLattice.from_bandlimit(cfg.bandlimit, tuple(dims))
    except (ValueError, LatticeMismatchError) as exc:
        raise ConfigError(f"model.bandlimit={cfg.bandlimit} does not fit grid {tuple(dims)}: {exc}") from None


def final_transforms(state):
    """Per-subject map obtained by shooting the mean velocity at the mean alpha."""
    op = build_operator(state.lattice, state.mean_alpha())
    phi, phi_inv, _ = shoot(state.velocities.mean(axis=1), op, state.T)
    return phi, phi_inv


def run(cfg: RunConfig, dry_run=False) -> int:
    data = load_dataset(cfg.dataset)
    lattice = _lattice(cfg, data.dims)
    mc = cfg.mcem_config()
    log.info("dataset %s: %d images of %s, labels: %s; lattice %s", cfg.dataset, data.N, data.dims,
             "yes" if data.labels is not None else "no", lattice.dims)
    if data.N < 2:
        raise GridFormatError(f"{cfg.dataset}: atlas building needs at least two images")
    if dry_run:
        print(f"config and dataset OK: {data.N} images {data.dims}, lattice {lattice.dims}")
        return EXIT_OK

    fourier_field.FFT_WORKERS = cfg.workers
    out = Outputs(cfg.output)
    cfg.output.mkdir(parents=True, exist_ok=True)

    def checkpoint(state, row):
        np.savez(out.path(f"checkpoints/iter_{row.iteration:03d}.npz"), atlas=state.atlas,
                 velocities=state.velocities, alphas=state.alphas, chain_state=state.chain_state,
                 sigma2=state.noise.sigma2, k=state.hyper.k, beta=state.hyper.beta)

    history = []
    try:
        state, history = run_mcem(data.images, lattice, mc, data.spacing, callback=checkpoint)
        write_grid(out.path("atlas.grid"), state.atlas, "scalar", data.spacing)
        np.savez(out.path("velocities.npz"), velocities=state.velocities, alphas=state.alphas,
                 names=np.array(data.names))
        phi, phi_inv = final_transforms(state)
        for n, name in enumerate(data.names):
            write_grid(out.path(f"transforms/{name}_phi.grid"), phi.map[n], "vector", data.spacing)

        with open(out.path("sharpness.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "w", "mean", "std", "n_patches", "n_skipped"])
            for label, img in (("atlas", state.atlas), ("intensity_mean", data.images.mean(axis=0))):
                for size in cfg.patch_sizes:
                    rep = sharpness(img, size, cfg.n_patches, cfg.metrics_seed)
                    w.writerow([label, size, _fmt(rep.mean), _fmt(rep.std), rep.n_patches, rep.n_skipped])

        extra = {}
        if data.labels is not None:
            seg_atlas = label_atlas(data.labels, phi_inv)
            write_grid(out.path("atlas_seg.grid"), seg_atlas, "label", data.spacing)
            with open(out.path("dice.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["subject", "label", "dice"])
                means = []
                for n, name in enumerate(data.names):
                    prop = propagate_segmentation(seg_atlas, DeformationField(phi.map[n], data.spacing))
                    scores, m = mean_dice(prop, data.labels[n])
                    for lab, s in scores.items():
                        w.writerow([name, lab, _fmt(s)])
                    w.writerow([name, "mean", _fmt(m)])
                    means.append(m)
                w.writerow(["all", "mean", _fmt(np.mean(means))])
            extra["mean_dice"] = float(np.mean(means))
    except BaseException as exc:
        history = getattr(exc, "history", history)
        _write_history(out.path("history.csv"), history, data.N)
        out.manifest("failed", cfg, f"{type(exc).__name__}: {exc}")
        raise
    _write_history(out.path("history.csv"), history, data.N)
    out.manifest("complete", cfg, extra={"iterations": len(history), **extra})
    log.info("wrote %d artifacts to %s", len(out.files), cfg.output)
    return EXIT_OK


def synth(args) -> int:
    ds = generate_synthetic(args.kind, args.n, args.magnitude, args.seed, tuple(args.dims),
                            alpha_range=(args.alpha_min, args.alpha_max), bandlimit=args.bandlimit)
    root = Path(args.out)
    save_dataset(root, ds.images, ds.labels)
    truth = root / "truth"
    truth.mkdir(parents=True, exist_ok=True)
    write_grid(truth / "base.grid", ds.base_image)
    write_grid(truth / "base_seg.grid", ds.base_labels, "label")
    for n in range(ds.N):
        write_grid(truth / f"subject{n:03d}_phi.grid", ds.phi[n], "vector")
        write_grid(truth / f"subject{n:03d}_phi_inv.grid", ds.phi_inv[n], "vector")
    np.savez(truth / "velocities.npz", velocities=ds.velocities, alphas=ds.alphas,
             lattice=np.array(ds.lattice.dims))
    (truth / "params.json").write_text(json.dumps({
        "kind": args.kind, "N": args.n, "magnitude": args.magnitude, "seed": args.seed,
        "dims": list(args.dims), "bandlimit": args.bandlimit, "alphas": [float(a) for a in ds.alphas],
    }, indent=2) + "\n")
    print(f"wrote {ds.N} {args.kind} subjects to {root}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hbatlas", description="Population atlas estimation with "
                                "per-subject smoothness weights")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="build an atlas from a dataset directory")
    r.add_argument("--config", required=True, help="INI config file")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable)")
    r.add_argument("--workers", type=int, help="shorthand for --set run.workers=N")
    r.add_argument("--dry-run", action="store_true", help="validate config and dataset, then exit")

    s = sub.add_parser("synth", help="generate a synthetic labelled population")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", default="bullseye", choices=SHAPES)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--magnitude", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--dims", type=int, nargs="+", default=[64, 64])
    s.add_argument("--alpha-min", type=float, default=8.0)
    s.add_argument("--alpha-max", type=float, default=64.0)
    s.add_argument("--bandlimit", type=int, default=15)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            if args.n < 2:
                raise ConfigError("--n must be at least 2")
            if len(args.dims) not in (2, 3):
                raise ConfigError("--dims takes 2 or 3 sizes")
            return synth(args)
        overrides = list(args.set)
        if args.workers is not None:
            overrides.append(f"run.workers={args.workers}")
        cfg = load_config(args.config, overrides)
        return run(cfg, dry_run=args.dry_run)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (GridFormatError, GridMismatchError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ArithmeticError, ValueError) as exc:
        log.error("numeric failure: %s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
