"""Command-line driver: synth, invert, extract, recompose, metrics, gradcheck, pipeline.

Exit codes: 0 success, 2 usage/config error, 3 numeric failure. Every
command is deterministic given its config and seeds. The CONMO_THREADS
environment variable caps worker count (0 = auto).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import pipeline as pl
from .diffusion import NoiseSchedule, ZeroDenoiser, load_trajectory
from .errors import (
    BadMagic,
    BadValue,
    DimMismatch,
    EmptyRegion,
    IndexOutOfRange,
    IoFailure,
    LengthMismatch,
    MissingBackground,
    MomixError,
    NonFinite,
    NoValidPairs,
    UnknownSubject,
)
from .features import (
    Directive,
    EditPlan,
    extract_descriptors,
    load_descriptor,
    load_plan,
)
from .gradcheck import run_gradcheck
from .guidance import GuidanceConfig
from .masks import MaskEdit
from .metrics import descriptor_distance
from .synth import load_scene
from .tensors import load_manifest, load_tensor

_USAGE_ERRORS = (
    BadValue,
    BadMagic,
    DimMismatch,
    IoFailure,
    UnknownSubject,
    MissingBackground,
    LengthMismatch,
    IndexOutOfRange,
)
_NUMERIC_ERRORS = (NonFinite, NoValidPairs, EmptyRegion)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="momix",
        description="Motion disentanglement and recomposition engine for latent videos.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene from a spec JSON")
    p.add_argument("scene_spec", help="path to a scene spec JSON")
    p.add_argument("out_dir")
    p.add_argument("--images", action="store_true", help="also dump PGM frames")

    p = sub.add_parser("invert", help="run DDIM inversion and archive the trajectory")
    p.add_argument("manifest", help="scene manifest JSON")
    p.add_argument("out_dir")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--floor", type=float, default=1e-4)
    p.add_argument("--zero-noise", action="store_true", help="use the zero denoiser")
    p.add_argument("--atlas", nargs="+", default=None, help="atlas latent files")
    p.add_argument("--bandwidth", type=float, default=0.5)

    p = sub.add_parser("extract", help="extract motion descriptors per source per timestep")
    p.add_argument("traj_dir", help="trajectory archive directory")
    p.add_argument("manifest", help="scene manifest JSON")
    p.add_argument("out_dir")
    p.add_argument("--legacy-region", action="store_true", help="skip other-subject exclusion")
    p.add_argument(
        "--baseline",
        default=None,
        help="descriptor dir of an isolated-subject scene; prints refined and "
        "legacy distances against it",
    )

    p = sub.add_parser("recompose", help="apply an edit plan and sample a guided target video")
    p.add_argument("desc_dir", help="descriptor archive directory")
    p.add_argument("traj_dir", help="reference trajectory archive directory")
    p.add_argument("out_dir")
    p.add_argument("--plan", default=None, help="edit plan JSON (default: keep everything)")
    p.add_argument("--manifest", default=None, help="override the manifest recorded at extract")
    p.add_argument("--atlas", nargs="+", required=True, help="atlas latent files for the denoiser")
    p.add_argument("--bandwidth", type=float, default=0.5)
    p.add_argument("--soften", type=float, default=None, metavar="W_C")
    p.add_argument("--remove", action="append", default=[], metavar="ID")
    p.add_argument("--camera-only", action="store_true")
    p.add_argument("--shift", nargs=3, action="append", default=[], metavar=("ID", "DX", "DY"))
    p.add_argument("--resize", nargs=2, action="append", default=[], metavar=("ID", "FACTOR"))
    p.add_argument("--init", choices=["auto", "shared", "fresh"], default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--t-start", type=int, default=None)
    p.add_argument("--t-end", type=int, default=None)
    p.add_argument("--weight", action="append", default=[], metavar="ID=W")
    p.add_argument("--unguided", action="store_true", help="sample without guidance")

    p = sub.add_parser("metrics", help="score a generated video against its reference scene")
    p.add_argument("run_dir")
    p.add_argument("scene_dir")
    p.add_argument("--desc", default=None, help="reference descriptor dir")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="report path (default run_dir/metrics.json)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the guidance gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--fault", choices=["sign-flip"], default=None, help="test hook")
    p.add_argument("--zero-weights", action="store_true", help="test hook")

    p = sub.add_parser("pipeline", help="run synth->invert->extract->recompose->metrics")
    p.add_argument("config", help="run config JSON")
    p.add_argument("--out", default=None, help="override out_dir from the config")

    return parser


def _cmd_synth(args) -> int:
    spec = load_scene(args.scene_spec)
    out = pl.run_synth(spec, args.out_dir)
    if args.images:
        from .synth import write_frame_images

        write_frame_images(load_tensor(out / "latents_t0.cmt"), Path(args.out_dir) / "frames")
    print(f"scene written to {out} ({spec.n_frames} frames, {len(spec.blobs)} subjects)")
    return 0


def _cmd_invert(args) -> int:
    manifest = load_manifest(args.manifest)
    schedule = NoiseSchedule.default(n_steps=args.steps, power=args.power, floor=args.floor)
    if args.zero_noise:
        denoiser = ZeroDenoiser()
    else:
        atlas_paths = args.atlas if args.atlas else [manifest.latent_path("0")]
        atlas = [load_tensor(p) for p in atlas_paths]
        denoiser = pl.build_denoiser(atlas, schedule, bandwidth=args.bandwidth)
    out = pl.run_invert(manifest, schedule, denoiser, args.out_dir)
    print(f"trajectory archive written to {out} ({schedule.n_steps + 1} tensors)")
    return 0


def _cmd_extract(args) -> int:
    manifest = load_manifest(args.manifest)
    rel = os.path.relpath(args.manifest, args.out_dir)
    out = pl.run_extract(
        args.traj_dir,
        manifest,
        args.out_dir,
        legacy_region=args.legacy_region,
        manifest_path=rel,
    )
    index = json.loads((out / "extract_index.json").read_text())
    print(f"descriptors written to {out}: sources={index['sources']}, "
          f"timesteps=0..{index['n_steps']}")
    if args.baseline:
        _print_baseline_distances(args, manifest)
    return 0


def _print_baseline_distances(args, manifest) -> int:
    trajectory, _ = load_trajectory(args.traj_dir)
    masks = manifest.load_masks()
    baseline = {}
    for p in sorted(Path(args.baseline).glob("t000/*.json")):
        d = load_descriptor(p)
        baseline[d.source_id] = d
    for mode, legacy in (("refined", False), ("legacy", True)):
        descs = extract_descriptors(
            trajectory[0], masks, timestep=0, legacy_region=legacy, strict=False
        )
        for d in descs:
            ref = baseline.get(d.source_id)
            if ref is None:
                continue
            dist, n = descriptor_distance(d, ref)
            print(f"{mode} {d.source_id}: distance to baseline = {dist:.6g} over {n} pairs")
    return 0


def _parse_weights(items: list[str]) -> dict[str, float]:
    weights = {}
    for item in items:
        if "=" not in item:
            raise BadValue(f"--weight expects ID=W, got {item!r}")
        sid, _, val = item.partition("=")
        try:
            weights[sid] = float(val)
        except ValueError:
            raise BadValue(f"--weight expects a numeric value, got {item!r}")
    return weights


def _plan_from_args(args, manifest) -> EditPlan:
    base = load_plan(args.plan) if args.plan else EditPlan()
    directives = dict(base.directives)
    known = set(manifest.subject_ids)

    def check(sid):
        if sid not in known:
            raise UnknownSubject(f"unknown subject {sid!r}; manifest has {sorted(known)}")

    if args.soften is not None:
        for sid in known:
            directives.setdefault(sid, Directive("soften", w_c=args.soften))
    for sid in args.remove:
        check(sid)
        directives[sid] = Directive("remove")
    for sid, dx, dy in args.shift:
        check(sid)
        try:
            edit = MaskEdit("shift", dx=int(dx), dy=int(dy))
        except ValueError:
            raise BadValue(f"--shift expects integer dx dy, got {dx!r} {dy!r}")
        directives[sid] = Directive("mask_edit", edit=edit)
    for sid, factor in args.resize:
        check(sid)
        try:
            factor = float(factor)
        except ValueError:
            raise BadValue(f"--resize expects a numeric factor, got {factor!r}")
        anchor = ((manifest.height - 1) / 2.0, (manifest.width - 1) / 2.0)
        directives[sid] = Directive("mask_edit", edit=MaskEdit("scale", factor=factor, anchor=anchor))
    return EditPlan(
        directives=directives,
        include_background=base.include_background,
        w_c=args.soften if args.soften is not None else base.w_c,
        camera_only=args.camera_only or base.camera_only,
    )


def _cmd_recompose(args) -> int:
    desc_dir = Path(args.desc_dir)
    index = json.loads((desc_dir / "extract_index.json").read_text())
    manifest_path = args.manifest or index.get("manifest")
    if manifest_path is None:
        raise BadValue("no manifest recorded at extract time; pass --manifest")
    manifest_path = Path(manifest_path)
    if not manifest_path.is_absolute() and not manifest_path.exists():
        manifest_path = desc_dir / manifest_path
    manifest = load_manifest(manifest_path)
    plan = _plan_from_args(args, manifest)
    config = GuidanceConfig(
        step_size=args.step_size,
        n_inner_steps=args.inner_steps,
        t_start=args.t_start,
        t_end=args.t_end,
        per_source_weight=_parse_weights(args.weight),
    )
    atlas = [load_tensor(p) for p in args.atlas]
    result = pl.run_recompose(
        desc_dir,
        plan,
        args.traj_dir,
        args.out_dir,
        atlas=atlas,
        manifest=manifest,
        guidance_config=config,
        bandwidth=args.bandwidth,
        init=args.init,
        seed=args.seed,
        guided=not args.unguided,
    )
    if result.trace:
        first, last = result.trace[0]["loss"], result.trace[-1]["loss"]
        print(f"sampled with guidance: first loss {first:.6g}, last loss {last:.6g}")
    else:
        print("sampled without guidance")
    print(f"target video written to {Path(args.out_dir) / 'output.cmt'} (init={result.init_mode})")
    return 0


def _cmd_metrics(args) -> int:
    out_path = args.out or (Path(args.run_dir) / "metrics.json")
    report = pl.run_metrics(
        args.run_dir,
        args.scene_dir,
        desc_dir=args.desc,
        out_path=out_path,
        threshold=args.threshold,
    )
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(
        seed=args.seed,
        n_cases=args.cases,
        fault=args.fault,
        zero_weights=args.zero_weights,
    )
    if report.get("vacuous"):
        print("warning: all source weights are zero; gradient check is vacuous")
    print(
        f"gradcheck: {report['checked']} cases, max relative error "
        f"{report['max_rel_err']:.3e} (worst case {report.get('worst_case')})"
    )
    if not report["passed"]:
        print("gradcheck FAILED: analytic gradient disagrees with finite differences",
              file=sys.stderr)
        return 3
    print("gradcheck passed")
    return 0


def _cmd_pipeline(args) -> int:
    try:
        config = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadValue(f"{args.config}: invalid config JSON: {exc}") from exc
    out_root = args.out or config.get("out_dir")
    if out_root is None:
        raise BadValue("config needs 'out_dir' (or pass --out)")
    report = pl.run_pipeline(config, out_root)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "invert": _cmd_invert,
    "extract": _cmd_extract,
    "recompose": _cmd_recompose,
    "metrics": _cmd_metrics,
    "gradcheck": _cmd_gradcheck,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except MomixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
