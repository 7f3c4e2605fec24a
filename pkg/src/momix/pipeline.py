"""End-to-end orchestration: synth -> invert -> extract -> recompose -> metrics.

Each stage writes plain files into a fixed layout under the run root so a
rerun with the same config and seeds is byte-identical. The CLI drives
these functions; tests call them directly.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import (
    Denoiser,
    GaussianAtlasDenoiser,
    NoiseSchedule,
    SamplingGuidance,
    ZeroDenoiser,
    ddim_invert,
    ddim_sample,
    load_trajectory,
    make_initial_noise,
    save_trajectory,
)
from .errors import BadValue, IoFailure, NoValidPairs
from .features import (
    EditPlan,
    MotionDescriptor,
    extract_descriptors,
    load_descriptor,
    plan_from_json,
    recompose,
    save_descriptor,
)
from .guidance import GuidanceConfig, GuidanceTarget, TargetRegions
from .masks import BACKGROUND_ID, apply_edit, background_track
from .metrics import compare_trajectories, descriptor_distance
from .synth import (
    SceneSpec,
    estimate_blob_track,
    load_scene,
    render_scene,
    save_scene,
    scene_from_json,
)
from .tensors import (
    LatentVideo,
    MaskTrack,
    SceneManifest,
    load_manifest,
    load_tensor,
    save_manifest,
    save_mask,
    save_tensor,
)

log = logging.getLogger(__name__)

_SAFE_NAME = re.compile(r"^[A-Za-z0-9_.-]+$")


def _safe_name(name: str) -> str:
    if not _SAFE_NAME.match(name):
        raise BadValue(f"id {name!r} is not filesystem-safe (use letters, digits, _ . -)")
    return name


def _write_json(path: Path, doc) -> None:
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadValue(f"{path}: invalid JSON: {exc}") from exc


# --- synth ------------------------------------------------------------------


def run_synth(spec: SceneSpec, out_dir) -> Path:
    """Render a scene and write latents, masks, trajectories, and the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents, tracks, trajectories = render_scene(spec)
    save_tensor(latents, out_dir / "latents_t0.cmt")
    mask_files = {}
    for track in tracks:
        name = f"mask_{_safe_name(track.subject_id)}.cmm"
        save_mask(track, out_dir / name)
        mask_files[track.subject_id] = name
    manifest = SceneManifest(
        frames=spec.n_frames,
        channels=spec.n_channels,
        height=spec.height,
        width=spec.width,
        latents={"0": "latents_t0.cmt"},
        masks=mask_files,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    _write_json(
        out_dir / "trajectories.json",
        {
            "subjects": {sid: [list(p) for p in traj] for sid, traj in trajectories.items()},
            "drift": [list(d) for d in spec.background_drift],
        },
    )
    save_scene(spec, out_dir / "spec.json")
    return out_dir


# --- invert -----------------------------------------------------------------


def build_denoiser(
    atlas: list[LatentVideo] | None, schedule: NoiseSchedule, bandwidth: float = 0.5
) -> Denoiser:
    if not atlas:
        return ZeroDenoiser()
    return GaussianAtlasDenoiser(atlas, schedule, bandwidth=bandwidth)


def run_invert(
    manifest: SceneManifest,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    out_dir,
) -> Path:
    out_dir = Path(out_dir)
    z0 = manifest.load_latent("0")
    trajectory = ddim_invert(z0, schedule, denoiser)
    save_trajectory(trajectory, schedule, out_dir)
    return out_dir


# --- extract ----------------------------------------------------------------


def run_extract(
    traj_dir,
    manifest: SceneManifest,
    out_dir,
    *,
    legacy_region: bool = False,
    manifest_path=None,
) -> Path:
    """Extract descriptors for every source at every stored timestep."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectory, schedule = load_trajectory(traj_dir)
    masks = manifest.load_masks()
    sources_seen: set[str] = set()
    for t, latents in enumerate(trajectory):
        t_dir = out_dir / f"t{t:03d}"
        t_dir.mkdir(exist_ok=True)
        descriptors = extract_descriptors(
            latents, masks, timestep=t, legacy_region=legacy_region, strict=False
        )
        for desc in descriptors:
            save_descriptor(desc, t_dir / f"{_safe_name(desc.source_id)}.json")
            sources_seen.add(desc.source_id)
    index = {
        "n_steps": schedule.n_steps,
        "timesteps": list(range(schedule.n_steps + 1)),
        "sources": sorted(sources_seen),
        "legacy_region": legacy_region,
        "manifest": str(manifest_path) if manifest_path else None,
    }
    _write_json(out_dir / "extract_index.json", index)
    return out_dir


def load_references(desc_dir) -> dict[int, list[MotionDescriptor]]:
    desc_dir = Path(desc_dir)
    index = _read_json(desc_dir / "extract_index.json")
    refs: dict[int, list[MotionDescriptor]] = {}
    for t in index["timesteps"]:
        t_dir = desc_dir / f"t{int(t):03d}"
        descs = [load_descriptor(p) for p in sorted(t_dir.glob("*.json"))]
        refs[int(t)] = descs
    return refs


# --- recompose + guided sampling ---------------------------------------------


def build_target_masks(
    subject_masks: list[MaskTrack],
    plan: EditPlan,
    dims: tuple[int, int, int] | None = None,
) -> dict[str, MaskTrack]:
    """Target-side tracks: subject masks (after any plan edits) plus background.

    ``dims`` (frames, height, width) is required when there are no subjects.
    """
    edited: list[MaskTrack] = []
    for track in subject_masks:
        directive = plan.directive_for(track.subject_id)
        if directive.kind == "mask_edit":
            track = apply_edit(track, directive.edit)
        edited.append(track)
    out = {t.subject_id: t for t in edited}
    if subject_masks:
        dims = (subject_masks[0].n_frames, subject_masks[0].height, subject_masks[0].width)
    out[BACKGROUND_ID] = background_track(edited, dims=dims)
    return out


@dataclass
class RecomposeResult:
    output: LatentVideo
    trace: list[dict]
    init_mode: str


def run_recompose(
    desc_dir,
    plan: EditPlan | None,
    traj_dir,
    out_dir,
    *,
    atlas: list[LatentVideo],
    manifest: SceneManifest,
    guidance_config: GuidanceConfig | None = None,
    bandwidth: float = 0.5,
    init: str = "auto",
    seed: int = 0,
    guided: bool = True,
) -> RecomposeResult:
    """Build the guidance problem from stored descriptors and sample a target video."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectory, schedule = load_trajectory(traj_dir)
    denoiser = build_denoiser(atlas, schedule, bandwidth=bandwidth)
    plan = plan if plan is not None else EditPlan()
    if init == "auto":
        wants_fresh = plan.camera_only or any(
            d.kind == "mask_edit" for d in plan.directives.values()
        )
        init_mode = "fresh" if wants_fresh else "shared"
    else:
        init_mode = init
    zT = make_initial_noise(trajectory[-1], mode=init_mode, seed=seed)

    guidance = None
    if guided:
        config = guidance_config if guidance_config is not None else GuidanceConfig()
        refs_by_t_raw = load_references(desc_dir)
        subject_masks = manifest.load_masks()
        target_masks = build_target_masks(
            subject_masks, plan, dims=(manifest.frames, manifest.height, manifest.width)
        )
        regions = TargetRegions(target_masks)
        window = config.window(schedule.n_steps)
        references_by_t: dict[int, list[MotionDescriptor]] = {}
        for t in range(window[1], window[0] + 1):
            if t not in refs_by_t_raw:
                raise BadValue(f"descriptor archive lacks timestep {t} needed by guidance")
            references_by_t[t] = recompose(refs_by_t_raw[t], plan)
        probe_refs = references_by_t[window[1]]
        target = GuidanceTarget(
            probe_refs, regions=regions, weights=config.per_source_weight
        )
        if target.enforced_pair_count() == 0:
            raise NoValidPairs("guidance problem has no enforced pairs")
        guidance = SamplingGuidance(
            config=config, target=target, references_by_t=references_by_t
        )

    output = ddim_sample(zT, schedule, denoiser, guidance=guidance)
    save_tensor(output, out_dir / "output.cmt")
    trace = guidance.trace if guidance is not None else []
    trace_path = out_dir / "trace.jsonl"
    try:
        with open(trace_path, "w") as fh:
            for entry in trace:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {trace_path}: {exc}") from exc
    _write_json(
        out_dir / "run.json",
        {"init": init_mode, "seed": seed, "guided": guided, "bandwidth": bandwidth},
    )
    return RecomposeResult(output=output, trace=trace, init_mode=init_mode)


# --- metrics ------------------------------------------------------------------


def run_metrics(run_dir, scene_dir, desc_dir=None, out_path=None, threshold: float = 0.5) -> dict:
    """Compare a generated video against its reference scene.

    Blob trajectories are estimated from the output latents via signature
    projection and scored against the reference ground truth; descriptor
    distances compare clean-latent descriptors over the reference masks.
    """
    run_dir, scene_dir = Path(run_dir), Path(scene_dir)
    output = load_tensor(run_dir / "output.cmt")
    spec = load_scene(scene_dir / "spec.json")
    truth = _read_json(scene_dir / "trajectories.json")
    report: dict = {"subjects": {}, "descriptor_distances": {}, "warnings": []}
    for blob in spec.blobs:
        centroids, areas = estimate_blob_track(output, blob.channel_signature, threshold)
        missing = sum(1 for c in centroids if c is None)
        entry: dict = {"areas": areas, "missing_frames": missing}
        if missing == 0:
            ref = truth["subjects"][blob.subject_id]
            entry["estimated"] = [list(c) for c in centroids]
            entry.update(compare_trajectories(ref, centroids).to_json())
        else:
            report["warnings"].append(
                f"subject {blob.subject_id}: blob not found in {missing} output frames"
            )
        report["subjects"][blob.subject_id] = entry

    manifest = load_manifest(scene_dir / "manifest.json")
    masks = manifest.load_masks()
    try:
        out_desc = extract_descriptors(output, masks, timestep=0, strict=False)
    except NoValidPairs:
        out_desc = []
    ref_by_source: dict[str, MotionDescriptor] = {}
    if desc_dir is not None and (Path(desc_dir) / "t000").exists():
        for p in sorted(Path(desc_dir).glob("t000/*.json")):
            d = load_descriptor(p)
            ref_by_source[d.source_id] = d
    else:
        ref_latents = manifest.load_latent("0")
        for d in extract_descriptors(ref_latents, masks, timestep=0, strict=False):
            ref_by_source[d.source_id] = d
    for d in out_desc:
        ref = ref_by_source.get(d.source_id)
        if ref is None:
            continue
        dist, count = descriptor_distance(ref, d)
        ref_norm = 0.0
        for i, j in ref.forward_pairs():
            if d.has_pair(i, j):
                v = ref.delta(i, j)
                ref_norm += float(v @ v)
        rel = float(np.sqrt(dist / ref_norm)) if ref_norm > 0 else None
        if count == 0:
            report["warnings"].append(f"source {d.source_id}: no shared valid pairs")
        report["descriptor_distances"][d.source_id] = {
            "distance": dist,
            "n_pairs": count,
            "relative_l2": rel,
        }
    if out_path is not None:
        _write_json(Path(out_path), report)
    return report


# --- full pipeline --------------------------------------------------------------


def guidance_config_from_json(doc: dict) -> GuidanceConfig:
    return GuidanceConfig(
        step_size=doc.get("step_size"),
        n_inner_steps=int(doc.get("n_inner_steps", 3)),
        t_start=doc.get("t_start"),
        t_end=doc.get("t_end"),
        per_source_weight={str(k): float(v) for k, v in doc.get("weights", {}).items()},
        w_c=float(doc.get("w_c", 0.0)),
    )


def run_pipeline(config: dict, out_root) -> dict:
    """Run every stage per a config document; returns the metrics report."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    try:
        scene_doc = config["scene"]
    except KeyError as exc:
        raise BadValue("pipeline config needs a 'scene'") from exc
    spec = (
        load_scene(scene_doc) if isinstance(scene_doc, str) else scene_from_json(scene_doc)
    )
    scene_dir = run_synth(spec, out_root / "scene")
    manifest = load_manifest(scene_dir / "manifest.json")

    sched_doc = config.get("schedule", {})
    schedule = NoiseSchedule.default(
        n_steps=int(sched_doc.get("n_steps", 20)),
        power=float(sched_doc.get("power", 2.0)),
        floor=float(sched_doc.get("floor", 1e-4)),
    )
    atlas_dir = out_root / "atlas"
    atlas_dir.mkdir(exist_ok=True)
    atlas: list[LatentVideo] = []
    if config.get("atlas_include_reference", True):
        atlas.append(manifest.load_latent("0"))
    for member_doc in config.get("atlas_scenes", []):
        member_spec = (
            load_scene(member_doc) if isinstance(member_doc, str) else scene_from_json(member_doc)
        )
        member_latents, _, _ = render_scene(member_spec)
        atlas.append(member_latents)
    for k, member in enumerate(atlas):
        save_tensor(member, atlas_dir / f"member{k:03d}.cmt")

    bandwidth = float(config.get("bandwidth", 0.5))
    if str(config.get("invert_denoiser", "atlas")) == "zero":
        invert_denoiser: Denoiser = ZeroDenoiser()
    else:
        invert_denoiser = build_denoiser(atlas, schedule, bandwidth=bandwidth)
    traj_dir = run_invert(manifest, schedule, invert_denoiser, out_root / "traj")

    desc_dir = run_extract(
        traj_dir,
        manifest,
        out_root / "desc",
        legacy_region=bool(config.get("legacy_region", False)),
        manifest_path="../scene/manifest.json",
    )

    plan = plan_from_json(config.get("plan", {}))
    gcfg = guidance_config_from_json(config.get("guidance", {}))
    result = run_recompose(
        desc_dir,
        plan,
        traj_dir,
        out_root / "run",
        atlas=atlas,
        manifest=manifest,
        guidance_config=gcfg,
        bandwidth=bandwidth,
        init=str(config.get("init", "auto")),
        seed=int(config.get("seed", 0)),
        guided=bool(config.get("guided", True)),
    )
    report = run_metrics(
        out_root / "run",
        scene_dir,
        desc_dir=desc_dir,
        out_path=out_root / "metrics.json",
        threshold=float(config.get("metrics", {}).get("threshold", 0.5)),
    )
    recorded = {k: v for k, v in config.items() if k != "out_dir"}
    _write_json(out_root / "config.json", recorded)
    return report
