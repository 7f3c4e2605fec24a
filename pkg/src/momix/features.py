"""Masked motion descriptors: pooled feature vectors, pairwise deltas, blends.

The motion cue for a source (a subject or the background) at one timestep
is the set of pairwise deltas ``delta(i, j) = mean over the pair region of
frame i  -  mean over the same region of frame j``, one vector of channel
means per ordered frame pair. Both means share one region per pair, so
antisymmetry ``delta(i, j) == -delta(j, i)`` holds exactly in floating
point. Pairs whose region is empty carry no vector at all: an absent pair
means "no evidence", not "no motion".
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

from .errors import (
    BadValue,
    DimMismatch,
    EmptyRegion,
    IoFailure,
    LengthMismatch,
    MissingBackground,
    NoValidPairs,
    UnknownSubject,
)
from .masks import (
    BACKGROUND_ID,
    MaskEdit,
    background_pair_region,
    background_track,
    pair_region,
)
from .tensors import LatentVideo, MaskTrack, ensure_same_geometry, read_array, write_array

log = logging.getLogger(__name__)


def worker_count() -> int:
    """Worker cap from CONMO_THREADS; 0 or unset picks a small default."""
    raw = os.environ.get("CONMO_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise BadValue(f"CONMO_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise BadValue(f"CONMO_THREADS must be >= 0, got {n}")
    if n == 0:
        return min(4, os.cpu_count() or 1)
    return n


@dataclass(frozen=True)
class FeatureMap:
    """Optional fixed per-channel affine map applied before pooling."""

    scale: tuple[float, ...]
    offset: tuple[float, ...]

    def apply(self, frame: np.ndarray) -> np.ndarray:
        s = np.asarray(self.scale, dtype=np.float64)
        o = np.asarray(self.offset, dtype=np.float64)
        if s.shape[0] != frame.shape[0] or o.shape[0] != frame.shape[0]:
            raise LengthMismatch(
                f"feature map has {s.shape[0]} channels, frame has {frame.shape[0]}"
            )
        return frame * s[:, None, None] + o[:, None, None]

    def scale_vector(self, n_channels: int) -> np.ndarray:
        s = np.asarray(self.scale, dtype=np.float64)
        if s.shape[0] != n_channels:
            raise LengthMismatch(f"feature map has {s.shape[0]} channels, need {n_channels}")
        return s


def lsmm(frame_features: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Per-channel mean of a (channels, height, width) frame over a region."""
    frame_features = np.asarray(frame_features)
    if frame_features.ndim != 3:
        raise DimMismatch(f"frame features must be 3-D, got {frame_features.shape}")
    region = np.asarray(region, dtype=bool)
    if region.shape != frame_features.shape[1:]:
        raise DimMismatch(
            f"region {region.shape} does not match frame spatial dims {frame_features.shape[1:]}"
        )
    n = int(np.count_nonzero(region))
    if n == 0:
        raise EmptyRegion("cannot pool over an empty region")
    flat = np.flatnonzero(region.ravel())
    sums = frame_features.reshape(frame_features.shape[0], -1)[:, flat].sum(
        axis=1, dtype=np.float64
    )
    return sums / n


def motion_delta(
    latents_i: np.ndarray,
    latents_j: np.ndarray,
    subject: MaskTrack,
    others: Sequence[MaskTrack],
    i: int,
    j: int,
    feature_map: FeatureMap | None = None,
) -> np.ndarray:
    """Delta of pooled features between frames i and j over their shared pair region."""
    region = pair_region(subject, others, i, j)
    if feature_map is not None:
        latents_i = feature_map.apply(np.asarray(latents_i, dtype=np.float64))
        latents_j = feature_map.apply(np.asarray(latents_j, dtype=np.float64))
    return lsmm(latents_i, region) - lsmm(latents_j, region)


@dataclass(frozen=True, eq=False, repr=False)
class MotionDescriptor:
    """All pairwise deltas for one motion source at one timestep.

    ``deltas`` stores both orientations of every valid pair; the mirror of
    (i, j) is the exact negation. ``valid_pairs`` is the symmetric set of
    ordered pairs whose region was non-empty.
    """

    source_id: str
    timestep: int
    n_frames: int
    deltas: Mapping[tuple[int, int], np.ndarray]
    valid_pairs: frozenset[tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "deltas", dict(self.deltas))
        object.__setattr__(self, "valid_pairs", frozenset(self.valid_pairs))

    @classmethod
    def from_forward_pairs(
        cls,
        source_id: str,
        timestep: int,
        n_frames: int,
        forward: Mapping[tuple[int, int], np.ndarray],
    ) -> "MotionDescriptor":
        """Build from i<j deltas, materializing mirrors by negation."""
        deltas: dict[tuple[int, int], np.ndarray] = {}
        for (i, j), vec in forward.items():
            if not i < j:
                raise BadValue(f"forward pairs must have i < j, got ({i}, {j})")
            vec = np.asarray(vec, dtype=np.float64)
            deltas[(i, j)] = vec
            deltas[(j, i)] = -vec
        return cls(
            source_id=source_id,
            timestep=timestep,
            n_frames=n_frames,
            deltas=deltas,
            valid_pairs=frozenset(deltas.keys()),
        )

    @property
    def n_channels(self) -> int:
        for vec in self.deltas.values():
            return int(vec.shape[0])
        return 0

    def delta(self, i: int, j: int) -> np.ndarray:
        if i == j:
            return np.zeros(self.n_channels)
        return self.deltas[(i, j)]

    def has_pair(self, i: int, j: int) -> bool:
        return (i, j) in self.valid_pairs

    def forward_pairs(self) -> list[tuple[int, int]]:
        return sorted(p for p in self.valid_pairs if p[0] < p[1])

    def map_deltas(self, fn: Callable[[np.ndarray], np.ndarray]) -> "MotionDescriptor":
        forward = {p: fn(self.deltas[p]) for p in self.forward_pairs()}
        return MotionDescriptor.from_forward_pairs(
            self.source_id, self.timestep, self.n_frames, forward
        )

    def __repr__(self):
        return (
            f"MotionDescriptor({self.source_id!r}, t={self.timestep}, "
            f"pairs={len(self.valid_pairs) // 2})"
        )


def _region_for_source(
    source_id: str,
    subject_by_id: Mapping[str, MaskTrack],
    background: MaskTrack,
    legacy_region: bool,
) -> Callable[[int, int], np.ndarray]:
    if source_id == BACKGROUND_ID:
        return lambda i, j: background_pair_region(background, i, j)
    subject = subject_by_id[source_id]
    if legacy_region:
        others: list[MaskTrack] = []
    else:
        others = [t for sid, t in subject_by_id.items() if sid != source_id]
    return lambda i, j: pair_region(subject, others, i, j)


def _descriptor_for_source(
    data: np.ndarray,
    region_fn: Callable[[int, int], np.ndarray],
    source_id: str,
    timestep: int,
    feature_map: FeatureMap | None,
) -> MotionDescriptor:
    n_frames = data.shape[0]
    frames = data.astype(np.float64, copy=False)
    if feature_map is not None:
        frames = np.stack([feature_map.apply(frames[f]) for f in range(n_frames)])
    flat = frames.reshape(n_frames, frames.shape[1], -1)
    forward: dict[tuple[int, int], np.ndarray] = {}
    for i in range(n_frames):
        for j in range(i + 1, n_frames):
            region = region_fn(i, j)
            idx = np.flatnonzero(region.ravel())
            if idx.size == 0:
                continue
            mean_i = flat[i][:, idx].sum(axis=1, dtype=np.float64) / idx.size
            mean_j = flat[j][:, idx].sum(axis=1, dtype=np.float64) / idx.size
            forward[(i, j)] = mean_i - mean_j
    return MotionDescriptor.from_forward_pairs(source_id, timestep, n_frames, forward)


def extract_descriptors(
    latents: LatentVideo,
    subjects: Sequence[MaskTrack],
    timestep: int,
    *,
    include_background: bool = True,
    legacy_region: bool = False,
    feature_map: FeatureMap | None = None,
    strict: bool = True,
) -> list[MotionDescriptor]:
    """One descriptor per subject plus one for the background.

    A subject whose region is empty for every frame pair raises
    NoValidPairs when ``strict``, otherwise it is skipped with a warning.
    The background degrades to an empty descriptor instead of raising, so
    an all-covering subject (the global-mean degenerate case) still works.
    """
    subject_by_id: dict[str, MaskTrack] = {}
    for track in subjects:
        ensure_same_geometry(latents, track)
        if track.subject_id in subject_by_id:
            raise BadValue(f"duplicate subject id {track.subject_id!r}")
        if track.subject_id == BACKGROUND_ID:
            raise BadValue(f"subject id {BACKGROUND_ID!r} is reserved")
        subject_by_id[track.subject_id] = track
    dims = (latents.n_frames, latents.height, latents.width)
    background = background_track(list(subject_by_id.values()), dims=dims)

    source_ids = list(subject_by_id.keys())
    if include_background:
        source_ids.append(BACKGROUND_ID)

    def build(source_id: str) -> MotionDescriptor:
        region_fn = _region_for_source(source_id, subject_by_id, background, legacy_region)
        return _descriptor_for_source(latents.data, region_fn, source_id, timestep, feature_map)

    workers = worker_count()
    if workers > 1 and len(source_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            built = list(pool.map(build, source_ids))
    else:
        built = [build(s) for s in source_ids]

    out: list[MotionDescriptor] = []
    for desc in built:
        if not desc.valid_pairs and desc.source_id != BACKGROUND_ID:
            if strict:
                raise NoValidPairs(
                    f"subject {desc.source_id!r} has no non-empty pair region in any frame pair"
                )
            log.warning("skipping source %r: no valid frame pairs", desc.source_id)
            continue
        if not desc.valid_pairs and desc.source_id == BACKGROUND_ID:
            log.warning("background has no valid frame pairs (subjects cover every frame)")
        out.append(desc)
    if not any(d.valid_pairs for d in out):
        raise NoValidPairs("no source has any valid frame pair")
    return out


def soft_blend(subject_delta: np.ndarray, camera_delta: np.ndarray, w_c: float) -> np.ndarray:
    """Blend a subject delta toward the camera delta: (s + w_c*c) / (w_c + 1)."""
    s = np.asarray(subject_delta, dtype=np.float64)
    c = np.asarray(camera_delta, dtype=np.float64)
    if s.shape != c.shape:
        raise LengthMismatch(f"delta lengths differ: {s.shape} vs {c.shape}")
    if not w_c >= 0:
        raise BadValue(f"w_c must be non-negative, got {w_c}")
    if w_c == 0:
        return s.copy()
    return (s + w_c * c) / (w_c + 1.0)


# --- edit plans and recomposition ------------------------------------------


@dataclass(frozen=True)
class Directive:
    """Per-subject recomposition directive."""

    kind: Literal["keep", "remove", "soften", "mask_edit"]
    w_c: float | None = None
    edit: MaskEdit | None = None

    def __post_init__(self):
        if self.kind not in ("keep", "remove", "soften", "mask_edit"):
            raise BadValue(f"unknown directive kind {self.kind!r}")
        if self.kind == "mask_edit" and self.edit is None:
            raise BadValue("mask_edit directive requires an edit")
        if self.w_c is not None and not self.w_c >= 0:
            raise BadValue(f"w_c must be non-negative, got {self.w_c}")


@dataclass(frozen=True)
class EditPlan:
    """What to do with each source when recomposing motion for a new sample.

    Subjects without an explicit directive are kept. ``camera_only`` drops
    every subject and enforces only the background descriptor.
    """

    directives: Mapping[str, Directive] = field(default_factory=dict)
    include_background: bool = True
    w_c: float = 0.0
    camera_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "directives", dict(self.directives))
        if not self.w_c >= 0:
            raise BadValue(f"w_c must be non-negative, got {self.w_c}")

    def directive_for(self, subject_id: str) -> Directive:
        return self.directives.get(subject_id, Directive("keep"))


def recompose(descriptors: Sequence[MotionDescriptor], plan: EditPlan) -> list[MotionDescriptor]:
    """Apply an edit plan to a set of extracted descriptors.

    Mask edits pass the descriptor through untouched; they take effect on
    the target-side regions when the guidance problem is assembled.
    """
    by_id = {d.source_id: d for d in descriptors}
    background = by_id.get(BACKGROUND_ID)
    for sid in plan.directives:
        if sid == BACKGROUND_ID:
            raise UnknownSubject("directives apply to subjects, not the background")
        if sid not in by_id:
            raise UnknownSubject(f"plan references unknown subject {sid!r}")

    needs_background = plan.camera_only or any(
        d.kind in ("remove", "soften") for d in plan.directives.values()
    )
    if needs_background and background is None:
        raise MissingBackground("plan needs the background descriptor but none was extracted")

    if plan.camera_only:
        return [background]

    out: list[MotionDescriptor] = []
    for desc in descriptors:
        if desc.source_id == BACKGROUND_ID:
            if plan.include_background:
                out.append(desc)
            continue
        directive = plan.directive_for(desc.source_id)
        if directive.kind in ("keep", "mask_edit"):
            out.append(desc)
        elif directive.kind == "remove":
            out.append(
                MotionDescriptor(
                    source_id=desc.source_id,
                    timestep=desc.timestep,
                    n_frames=desc.n_frames,
                    deltas={p: v.copy() for p, v in background.deltas.items()},
                    valid_pairs=background.valid_pairs,
                )
            )
        else:  # soften
            w_c = directive.w_c if directive.w_c is not None else plan.w_c
            forward = {}
            for i, j in desc.forward_pairs():
                if not background.has_pair(i, j):
                    continue
                forward[(i, j)] = soft_blend(desc.delta(i, j), background.delta(i, j), w_c)
            out.append(
                MotionDescriptor.from_forward_pairs(
                    desc.source_id, desc.timestep, desc.n_frames, forward
                )
            )
    return out


def plan_to_json(plan: EditPlan) -> dict:
    subjects = {}
    for sid, d in plan.directives.items():
        entry: dict = {"op": d.kind}
        if d.w_c is not None:
            entry["w_c"] = d.w_c
        if d.edit is not None:
            entry["edit"] = {
                "kind": d.edit.kind,
                "dx": d.edit.dx,
                "dy": d.edit.dy,
                "factor": d.edit.factor,
                "anchor": list(d.edit.anchor) if d.edit.anchor is not None else None,
            }
        subjects[sid] = entry
    return {
        "subjects": subjects,
        "include_background": plan.include_background,
        "w_c": plan.w_c,
        "camera_only": plan.camera_only,
    }


def plan_from_json(doc: dict) -> EditPlan:
    try:
        directives = {}
        for sid, entry in doc.get("subjects", {}).items():
            edit = None
            if entry.get("edit") is not None:
                e = entry["edit"]
                edit = MaskEdit(
                    kind=e["kind"],
                    dx=int(e.get("dx", 0)),
                    dy=int(e.get("dy", 0)),
                    factor=float(e.get("factor", 1.0)),
                    anchor=tuple(e["anchor"]) if e.get("anchor") is not None else None,
                )
            directives[str(sid)] = Directive(
                kind=entry["op"],
                w_c=float(entry["w_c"]) if "w_c" in entry else None,
                edit=edit,
            )
        return EditPlan(
            directives=directives,
            include_background=bool(doc.get("include_background", True)),
            w_c=float(doc.get("w_c", 0.0)),
            camera_only=bool(doc.get("camera_only", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BadValue(f"malformed edit plan: {exc}") from exc


def load_plan(path) -> EditPlan:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        return plan_from_json(json.loads(text))
    except json.JSONDecodeError as exc:
        raise BadValue(f"{path}: invalid plan JSON: {exc}") from exc


def save_plan(plan: EditPlan, path) -> None:
    try:
        Path(path).write_text(json.dumps(plan_to_json(plan), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- descriptor archive -----------------------------------------------------


def save_descriptor(desc: MotionDescriptor, json_path) -> None:
    """Write a descriptor as a JSON manifest plus a (n_pairs, n_channels) tensor."""
    json_path = Path(json_path)
    tensor_rel = json_path.with_suffix(".cmt").name
    pairs = desc.forward_pairs()
    mat = (
        np.stack([desc.delta(i, j) for i, j in pairs])
        if pairs
        else np.zeros((0, max(desc.n_channels, 1)))
    )
    doc = {
        "source_id": desc.source_id,
        "timestep": desc.timestep,
        "n_frames": desc.n_frames,
        "valid_pairs": [list(p) for p in pairs],
        "tensor": tensor_rel,
    }
    if pairs:
        write_array(json_path.with_suffix(".cmt"), mat)
    try:
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {json_path}: {exc}") from exc


def load_descriptor(json_path) -> MotionDescriptor:
    json_path = Path(json_path)
    try:
        doc = json.loads(json_path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read {json_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadValue(f"{json_path}: invalid descriptor JSON: {exc}") from exc
    pairs = [tuple(p) for p in doc["valid_pairs"]]
    forward: dict[tuple[int, int], np.ndarray] = {}
    if pairs:
        mat = read_array(json_path.parent / doc["tensor"]).astype(np.float64)
        if mat.ndim != 2 or mat.shape[0] != len(pairs):
            raise DimMismatch(
                f"{json_path}: descriptor tensor shape {mat.shape} does not match "
                f"{len(pairs)} pairs"
            )
        for row, (i, j) in enumerate(pairs):
            forward[(int(i), int(j))] = mat[row]
    return MotionDescriptor.from_forward_pairs(
        str(doc["source_id"]), int(doc["timestep"]), int(doc["n_frames"]), forward
    )
