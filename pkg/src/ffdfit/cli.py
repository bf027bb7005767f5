"""Command-line interface: ``ffdfit <subcommand> ...``.

Failures print a single line ``error: <code>: <message>`` to stderr and exit
with status 1 (status 2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .errors import ConfigError, FFDError, SequenceError
from .ffd import assemble_tensor, build_lattice
from .fit import FitConfig, fit_cascade, fit_sequence, lattices_from_json, lattices_to_json
from .mesh_io import (
    MeshSequence,
    TemplateMesh,
    load_mesh,
    load_sequence,
    read_manifest_extra,
    save_mesh,
    save_sequence,
)
from .metrics import evaluate
from .objective import LossWeights, chamfer_loss
from .postproc import interpolate_sequence, project_caps
from .sampler import draw_samples
from .voxel import GridSpec, voxelize, write_grid

CONFIG_SCHEMA = 1

log = logging.getLogger("ffdfit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def _triple(text: str, cast=float) -> tuple:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected 1 or 3 comma-separated values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number in {text!r}") from None


def _int_triple(text: str) -> tuple:
    return _triple(text, int)


# --- configuration ----------------------------------------------------------

_CONFIG_FIELDS = {f.name for f in fields(FitConfig)}
_WEIGHT_FIELDS = {f.name for f in fields(LossWeights)}


def load_config(path) -> FitConfig:
    """Read a versioned fit configuration (``{"schema": 1, ...FitConfig fields}``)."""
    if path is None:
        return FitConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    schema = raw.pop("schema", None)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"{path}: unsupported or missing schema {schema!r} (expected {CONFIG_SCHEMA})")
    unknown = sorted(set(raw) - _CONFIG_FIELDS)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(unknown)}")
    weights = raw.get("weights")
    if weights is not None:
        if not isinstance(weights, dict):
            raise ConfigError(f"{path}: 'weights' must be an object")
        bad = sorted(set(weights) - _WEIGHT_FIELDS)
        if bad:
            raise ConfigError(f"{path}: unknown weight field(s) {', '.join(bad)}")
    try:
        return FitConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _apply_overrides(config: FitConfig, args) -> FitConfig:
    changes = {}
    for name in ("iters_per_block", "step_size", "optimizer", "smoothing", "convergence_tol"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "seed", None) is not None:
        changes["sampler_seed"] = args.seed
    changes["workers"] = args.threads
    cfg = config.to_dict()
    cfg.update(changes)
    if getattr(args, "alpha1", None) is not None:
        cfg["weights"] = {**cfg["weights"], "alpha1": args.alpha1}
    return FitConfig(**cfg)


# --- subcommands -----------------------------------------------------------

def _write_fit(result, out: Path, suffix: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(result.mesh, out / f"deformed{suffix}")
    (out / "lattices.json").write_text(lattices_to_json(result.lattices) + "\n")
    (out / "log.jsonl").write_text("".join(line + "\n" for line in result.log_lines()))
    return result.summary()


def _chamfer_summary(template: TemplateMesh, deformed: TemplateMesh, target: TemplateMesh) -> dict:
    def points(m):
        return {lab: m.vertices[m.structure_vertex_ids(lab)] for lab in range(m.n_structures)}
    initial = chamfer_loss(points(template), points(target))[0]
    final = chamfer_loss(points(deformed), points(target))[0]
    return {"initial_chamfer": initial, "final_chamfer": final,
            "chamfer_reduction": 1.0 - final / initial if initial > 0 else 0.0}


def cmd_fit(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    template = load_mesh(args.template)
    target = load_mesh(args.target)
    result = fit_cascade(template, target, config)
    out = Path(args.out)
    summary = _write_fit(result, out, Path(args.template).suffix)
    summary.update(_chamfer_summary(template, result.mesh, target))
    # wall time lives only in the summary so the mesh and log stay reproducible
    summary["wall_time_s"] = result.wall_time
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(f"chamfer {summary['initial_chamfer']:.6g} -> {summary['final_chamfer']:.6g} "
          f"(reduction {100 * summary['chamfer_reduction']:.2f}%) in {result.wall_time:.1f} s")
    return 0


def cmd_fit4d(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    template = load_mesh(args.template)
    seq = load_sequence(args.manifest)
    results = fit_sequence(template, list(seq.frames), config)
    out = Path(args.out)
    suffix = Path(args.template).suffix
    for i, (res, frame) in enumerate(zip(results, seq.frames)):
        fdir = out / f"frame_{i:04d}"
        summary = _write_fit(res, fdir, suffix)
        summary.update(_chamfer_summary(template, res.mesh, frame))
        (fdir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
        print(f"frame {i}: reduction {100 * summary['chamfer_reduction']:.2f}%")
    deformed = MeshSequence(tuple(r.mesh for r in results), seq.frame_times)
    save_sequence(deformed, out / "meshes", format=suffix.lstrip(".") or "obj")
    return 0


def cmd_deform(args) -> int:
    template = load_mesh(args.template)
    try:
        lattices = lattices_from_json(Path(args.lattice).read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FFDError(f"{args.lattice}: malformed lattice file ({exc})", code="parse-error") from None
    idx = len(lattices) - 1 if args.block is None else args.block
    if not 0 <= idx < len(lattices):
        raise FFDError(f"block {idx} not in file ({len(lattices)} lattices)", code="index-out-of-range")
    lat = lattices[idx]
    tensor = assemble_tensor(template.vertices, lat)
    save_mesh(template.with_vertices(template.vertices + tensor.matrix @ lat.displacements), args.out)
    return 0


def cmd_voxelize(args) -> int:
    mesh = load_mesh(args.mesh)
    if args.spacing is None:
        if args.origin != "auto":
            raise ConfigError("--origin needs --spacing")
        spec = GridSpec.covering(mesh.vertices, args.dims)
    elif args.origin == "auto":
        spec = GridSpec.centered(mesh.vertices, args.dims, args.spacing)
    else:
        try:
            origin = _triple(args.origin)
        except argparse.ArgumentTypeError as exc:
            raise ConfigError(f"--origin: {exc}") from None
        spec = GridSpec(tuple(args.dims), tuple(args.spacing), origin)
    grid = voxelize(mesh, spec, seed=args.seed or 0)
    write_grid(grid, args.out)
    print(f"{int(grid.values.sum())} of {grid.values.size} voxels occupied")
    return 0


def cmd_metrics(args) -> int:
    pred, truth = load_mesh(args.pred), load_mesh(args.truth)
    report = evaluate(pred, truth, grid_dims=args.grid_dims,
                      samples_per_mm2=args.samples_per_mm2, seed=args.seed or 0)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def cmd_caps(args) -> int:
    mesh = load_mesh(args.mesh)
    save_mesh(project_caps(mesh, args.tags), args.out)
    return 0


def cmd_interp4d(args) -> int:
    seq = load_sequence(args.manifest)
    period = args.period
    if period is None:
        period = read_manifest_extra(args.manifest).get("period")
    try:
        period = None if period is None else float(period)
    except (TypeError, ValueError):
        raise SequenceError(f"bad period {period!r}") from None
    out = interpolate_sequence(seq, args.dt, mode=args.mode, period=period)
    first = json.loads(Path(args.manifest).read_text())["frames"][0]["path"]
    save_sequence(out, args.out, format=Path(first).suffix.lstrip(".") or "obj")
    print(f"{len(out)} frames written")
    return 0


def cmd_sample(args) -> int:
    mesh = load_mesh(args.template)
    lat = build_lattice(mesh, args.dims)
    samples = draw_samples(mesh.vertices, lat, k=args.k, seed=args.seed or 0)
    samples.save(args.out)
    print(f"{samples.indices.shape[0]} controls x {samples.k} samples "
          f"({int(samples.fallback.sum())} uniform fallbacks)")
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap on worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="ffdfit", description="B-spline FFD template mesh fitting")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fit_flags(sp):
        sp.add_argument("--template", required=True)
        sp.add_argument("--config")
        sp.add_argument("--out", required=True)
        sp.add_argument("--iters", dest="iters_per_block", type=int)
        sp.add_argument("--step-size", type=float)
        sp.add_argument("--optimizer", choices=("adam_like", "plain_gd"))
        sp.add_argument("--alpha1", type=float)
        sp.add_argument("--smoothing", type=float)
        sp.add_argument("--convergence-tol", type=float)

    sp = sub.add_parser("fit", parents=[common], help="fit a template to a target mesh")
    fit_flags(sp)
    sp.add_argument("--target", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("fit4d", parents=[common], help="fit every frame of a sequence")
    fit_flags(sp)
    sp.add_argument("--manifest", required=True)
    sp.set_defaults(func=cmd_fit4d)

    sp = sub.add_parser("deform", parents=[common], help="apply saved lattice displacements")
    sp.add_argument("--template", required=True)
    sp.add_argument("--lattice", required=True)
    sp.add_argument("--block", type=int, help="lattice index in the file (default: last)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_deform)

    sp = sub.add_parser("voxelize", parents=[common], help="rasterize a watertight mesh")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--dims", type=_int_triple, default=(64, 64, 64))
    sp.add_argument("--spacing", type=_triple)
    sp.add_argument("--origin", default="auto")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_voxelize)

    sp = sub.add_parser("metrics", parents=[common], help="Dice, Jaccard, ASSD and HD")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--grid-dims", type=_int_triple, default=(64, 64, 64))
    sp.add_argument("--samples-per-mm2", type=float, default=1.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("caps", parents=[common], help="flatten tagged caps")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--tags", required=True, help="comma-separated tag names or globs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_caps)

    sp = sub.add_parser("interp4d", parents=[common], help="resample a mesh sequence in time")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--dt", type=float, required=True)
    sp.add_argument("--mode", choices=("linear", "cubic"), default="linear")
    sp.add_argument("--period", type=float,
                    help="cycle length; the output then wraps back to the first frame")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_interp4d)

    sp = sub.add_parser("sample", parents=[common], help="draw per-control surface samples")
    sp.add_argument("--template", required=True)
    sp.add_argument("--dims", type=_int_triple, default=(6, 6, 6))
    sp.add_argument("--k", type=int, default=16)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: usage: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FFDError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: file-not-found: {exc.filename}", file=sys.stderr)
    except OSError as exc:
        print(f"error: io-error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
