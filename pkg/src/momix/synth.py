"""Synthetic moving-blob scenes with exact masks and ground-truth trajectories.

Scenes are rendered directly in latent space: a smooth per-channel
background texture (a seeded sum of a few long-wavelength sinusoids,
sampled at drift-shifted coordinates so camera motion is visible in the
values) with opaque disks on top. Blobs occlude the texture and each
other (later blobs in the list win), which is what makes their position
readable through masked spatial means: a disk that moves uncovers texture
behind it and covers different texture ahead of it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadValue, DimMismatch, IoFailure
from .tensors import LatentVideo, MaskTrack

log = logging.getLogger(__name__)

_N_WAVES = 3


@dataclass(frozen=True)
class BlobSpec:
    """One opaque disk: per-frame center, radius in pixels, per-channel value."""

    subject_id: str
    trajectory: tuple[tuple[float, float], ...]
    radius: float
    channel_signature: tuple[float, ...]

    def __post_init__(self):
        if not self.radius > 0:
            raise BadValue(f"blob radius must be positive, got {self.radius}")
        object.__setattr__(
            self, "trajectory", tuple((float(r), float(c)) for r, c in self.trajectory)
        )
        object.__setattr__(
            self, "channel_signature", tuple(float(v) for v in self.channel_signature)
        )


@dataclass(frozen=True)
class SceneSpec:
    """Full description of a synthetic scene, deterministic given the seed."""

    n_frames: int
    n_channels: int
    height: int
    width: int
    blobs: tuple[BlobSpec, ...] = ()
    background_drift: tuple[tuple[float, float], ...] | None = None
    texture_seed: int = 0
    texture_amplitude: float = 0.5
    # wave lengths drawn uniformly from this range, in units of max(height, width);
    # longer waves keep pooled-mean deltas meaningful under larger mask edits
    texture_wavelengths: tuple[float, float] = (1.5, 3.0)

    def __post_init__(self):
        if self.n_frames < 2 or self.n_channels < 1 or self.height < 1 or self.width < 1:
            raise DimMismatch(
                f"invalid scene dims ({self.n_frames}, {self.n_channels}, "
                f"{self.height}, {self.width})"
            )
        drift = self.background_drift
        if drift is None:
            drift = tuple((0.0, 0.0) for _ in range(self.n_frames))
        else:
            drift = tuple((float(r), float(c)) for r, c in drift)
        if len(drift) != self.n_frames:
            raise DimMismatch(
                f"drift length {len(drift)} != n_frames {self.n_frames}"
            )
        object.__setattr__(self, "background_drift", drift)
        object.__setattr__(self, "blobs", tuple(self.blobs))
        for b in self.blobs:
            if len(b.trajectory) != self.n_frames:
                raise DimMismatch(
                    f"blob {b.subject_id!r} trajectory length {len(b.trajectory)} "
                    f"!= n_frames {self.n_frames}"
                )
            if len(b.channel_signature) != self.n_channels:
                raise DimMismatch(
                    f"blob {b.subject_id!r} signature length {len(b.channel_signature)} "
                    f"!= n_channels {self.n_channels}"
                )


def _texture_waves(spec: SceneSpec) -> list[list[tuple[float, float, float, float]]]:
    """Per-channel wave parameters (freq_r, freq_c, phase, amplitude)."""
    rng = np.random.default_rng(np.random.PCG64(spec.texture_seed))
    side = max(spec.height, spec.width)
    lo, hi = spec.texture_wavelengths
    per_channel = []
    for _ in range(spec.n_channels):
        waves = []
        for _ in range(_N_WAVES):
            wavelength = rng.uniform(lo * side, hi * side)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            fr = np.cos(angle) / wavelength
            fc = np.sin(angle) / wavelength
            amp = spec.texture_amplitude / _N_WAVES
            waves.append((float(fr), float(fc), float(phase), float(amp)))
        per_channel.append(waves)
    return per_channel


def _texture_frame(
    waves: list[list[tuple[float, float, float, float]]],
    height: int,
    width: int,
    drift: tuple[float, float],
) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float64)
    rr = rr - drift[0]
    cc = cc - drift[1]
    out = np.zeros((len(waves), height, width))
    for ch, channel_waves in enumerate(waves):
        for fr, fc, phase, amp in channel_waves:
            out[ch] += amp * np.sin(2.0 * np.pi * (fr * rr + fc * cc) + phase)
    return out


def _disk(height: int, width: int, center: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float64)
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def render_scene(
    spec: SceneSpec,
) -> tuple[LatentVideo, list[MaskTrack], dict[str, list[tuple[float, float]]]]:
    """Render a scene into (latents, mask tracks, ground-truth trajectories).

    Blobs are opaque: a covered cell takes the topmost blob's signature
    instead of the texture value. Masks are reported for every blob even
    where another blob occludes it.
    """
    waves = _texture_waves(spec)
    frames = np.zeros((spec.n_frames, spec.n_channels, spec.height, spec.width))
    mask_data = {b.subject_id: np.zeros((spec.n_frames, spec.height, spec.width), bool)
                 for b in spec.blobs}
    if len(mask_data) != len(spec.blobs):
        raise BadValue("blob subject ids must be unique")
    for f in range(spec.n_frames):
        frames[f] = _texture_frame(waves, spec.height, spec.width, spec.background_drift[f])
        for blob in spec.blobs:
            disk = _disk(spec.height, spec.width, blob.trajectory[f], blob.radius)
            mask_data[blob.subject_id][f] = disk
            if not disk.any():
                continue
            sig = np.asarray(blob.channel_signature, dtype=np.float64)
            frames[f][:, disk] = sig[:, None]
            r, c = blob.trajectory[f]
            if (
                r - blob.radius < 0
                or c - blob.radius < 0
                or r + blob.radius > spec.height - 1
                or c + blob.radius > spec.width - 1
            ):
                log.warning(
                    "blob %s clipped by frame border at frame %d", blob.subject_id, f
                )
    latents = LatentVideo(frames)
    tracks = [MaskTrack(mask_data[b.subject_id], subject_id=b.subject_id) for b in spec.blobs]
    trajectories = {b.subject_id: list(b.trajectory) for b in spec.blobs}
    return latents, tracks, trajectories


def centroid_trajectory(mask: MaskTrack) -> list[tuple[float, float] | None]:
    """Arithmetic mean of true-cell coordinates per frame; None for empty frames."""
    out: list[tuple[float, float] | None] = []
    for f in range(mask.n_frames):
        rows, cols = np.nonzero(mask.frame(f))
        if rows.size == 0:
            out.append(None)
        else:
            out.append((float(rows.mean()), float(cols.mean())))
    return out


def estimate_blob_track(
    latents: LatentVideo,
    signature: Sequence[float],
    threshold: float = 0.5,
) -> tuple[list[tuple[float, float] | None], list[int]]:
    """Locate a blob in arbitrary latents by projecting onto its signature.

    The projection is normalized so cells carrying exactly the signature
    score 1.0; cells with projection >= threshold count toward the blob.
    Returns per-frame centroids (None when nothing passes) and areas.
    """
    sig = np.asarray(signature, dtype=np.float64)
    norm2 = float(sig @ sig)
    if norm2 <= 0:
        raise BadValue("signature must be a nonzero vector")
    proj = np.einsum("fchw,c->fhw", latents.data.astype(np.float64), sig) / norm2
    centroids: list[tuple[float, float] | None] = []
    areas: list[int] = []
    for f in range(latents.n_frames):
        sel = proj[f] >= threshold
        n = int(np.count_nonzero(sel))
        areas.append(n)
        if n == 0:
            centroids.append(None)
        else:
            rows, cols = np.nonzero(sel)
            centroids.append((float(rows.mean()), float(cols.mean())))
    return centroids, areas


# --- edits used to build scene variants ------------------------------------


def shift_blob(spec: SceneSpec, subject_id: str, dy: float, dx: float) -> SceneSpec:
    """Variant of the scene with one blob's trajectory translated."""
    blobs = []
    found = False
    for b in spec.blobs:
        if b.subject_id == subject_id:
            found = True
            b = replace(b, trajectory=tuple((r + dy, c + dx) for r, c in b.trajectory))
        blobs.append(b)
    if not found:
        raise BadValue(f"no blob named {subject_id!r}")
    return replace(spec, blobs=tuple(blobs))


def freeze_blob(spec: SceneSpec, subject_id: str, frame: int = 0) -> SceneSpec:
    """Variant with one blob pinned to its position at ``frame``."""
    blobs = []
    found = False
    for b in spec.blobs:
        if b.subject_id == subject_id:
            found = True
            b = replace(b, trajectory=tuple(b.trajectory[frame] for _ in b.trajectory))
        blobs.append(b)
    if not found:
        raise BadValue(f"no blob named {subject_id!r}")
    return replace(spec, blobs=tuple(blobs))


def reverse_blob(spec: SceneSpec, subject_id: str) -> SceneSpec:
    """Variant with one blob's trajectory played backwards."""
    blobs = []
    found = False
    for b in spec.blobs:
        if b.subject_id == subject_id:
            found = True
            b = replace(b, trajectory=tuple(reversed(b.trajectory)))
        blobs.append(b)
    if not found:
        raise BadValue(f"no blob named {subject_id!r}")
    return replace(spec, blobs=tuple(blobs))


def retime_blob(spec: SceneSpec, subject_id: str, rate: float) -> SceneSpec:
    """Variant with one blob's motion amplitude scaled about its start position."""
    blobs = []
    found = False
    for b in spec.blobs:
        if b.subject_id == subject_id:
            found = True
            r0, c0 = b.trajectory[0]
            traj = tuple((r0 + rate * (r - r0), c0 + rate * (c - c0)) for r, c in b.trajectory)
            b = replace(b, trajectory=traj)
        blobs.append(b)
    if not found:
        raise BadValue(f"no blob named {subject_id!r}")
    return replace(spec, blobs=tuple(blobs))


def scale_blob(
    spec: SceneSpec, subject_id: str, factor: float, anchor: tuple[float, float]
) -> SceneSpec:
    """Variant with one blob's radius and trajectory scaled about ``anchor``."""
    blobs = []
    found = False
    for b in spec.blobs:
        if b.subject_id == subject_id:
            found = True
            traj = tuple(
                (anchor[0] + factor * (r - anchor[0]), anchor[1] + factor * (c - anchor[1]))
                for r, c in b.trajectory
            )
            b = replace(b, trajectory=traj, radius=b.radius * factor)
        blobs.append(b)
    if not found:
        raise BadValue(f"no blob named {subject_id!r}")
    return replace(spec, blobs=tuple(blobs))


# --- JSON (de)serialization -------------------------------------------------


def scene_to_json(spec: SceneSpec) -> dict:
    return {
        "n_frames": spec.n_frames,
        "n_channels": spec.n_channels,
        "height": spec.height,
        "width": spec.width,
        "texture_seed": spec.texture_seed,
        "texture_amplitude": spec.texture_amplitude,
        "texture_wavelengths": list(spec.texture_wavelengths),
        "background_drift": [list(d) for d in spec.background_drift],
        "blobs": [
            {
                "subject_id": b.subject_id,
                "trajectory": [list(p) for p in b.trajectory],
                "radius": b.radius,
                "channel_signature": list(b.channel_signature),
            }
            for b in spec.blobs
        ],
    }


def scene_from_json(doc: dict) -> SceneSpec:
    try:
        blobs = tuple(
            BlobSpec(
                subject_id=str(b["subject_id"]),
                trajectory=tuple(tuple(p) for p in b["trajectory"]),
                radius=float(b["radius"]),
                channel_signature=tuple(b["channel_signature"]),
            )
            for b in doc.get("blobs", [])
        )
        return SceneSpec(
            n_frames=int(doc["n_frames"]),
            n_channels=int(doc["n_channels"]),
            height=int(doc["height"]),
            width=int(doc["width"]),
            blobs=blobs,
            background_drift=(
                tuple(tuple(d) for d in doc["background_drift"])
                if doc.get("background_drift") is not None
                else None
            ),
            texture_seed=int(doc.get("texture_seed", 0)),
            texture_amplitude=float(doc.get("texture_amplitude", 0.5)),
            texture_wavelengths=tuple(doc.get("texture_wavelengths", (1.5, 3.0))),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise BadValue(f"malformed scene spec: {exc}") from exc


def load_scene(path) -> SceneSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        return scene_from_json(json.loads(text))
    except json.JSONDecodeError as exc:
        raise BadValue(f"{path}: invalid scene JSON: {exc}") from exc


def save_scene(spec: SceneSpec, path) -> None:
    try:
        Path(path).write_text(json.dumps(scene_to_json(spec), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_frame_images(latents: LatentVideo, out_dir, channel: int = 0) -> list[Path]:
    """Dump one normalized PGM per frame for eyeballing a latent video."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo = float(latents.data[:, channel].min())
    hi = float(latents.data[:, channel].max())
    span = (hi - lo) or 1.0
    paths = []
    for f in range(latents.n_frames):
        img = ((latents.data[f, channel] - lo) / span * 255.0).astype(np.uint8)
        header = f"P5\n{latents.width} {latents.height}\n255\n".encode()
        p = out_dir / f"frame{f:03d}.pgm"
        p.write_bytes(header + img.tobytes())
        paths.append(p)
    return paths
