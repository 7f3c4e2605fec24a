"""Motion-guidance energy, its exact gradient, and the latent update step.

The energy compares reference deltas against deltas recomputed from the
target latents over target-side regions. It is a quadratic in the
latents: each (source, pair, channel) term is a squared difference of
region means, so the exact gradient distributes the residual uniformly
over the pair region with opposite signs on the two frames. Enforced
pairs are those valid on both sides; a pair whose target region is empty
(for example after a shift clips it away) carries no target evidence and
is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadValue,
    DimMismatch,
    MissingBackground,
    NoValidPairs,
    UnknownSubject,
)
from .features import FeatureMap, MotionDescriptor
from .masks import BACKGROUND_ID, background_pair_region, pair_region
from .tensors import LatentVideo, MaskTrack


@dataclass(frozen=True)
class GuidanceConfig:
    """Optimizer and window settings for the latent guidance updates.

    ``step_size=None`` uses 1/L per update, with L the curvature bound of
    the quadratic (guaranteed non-increasing loss). ``t_start``/``t_end``
    default to the first 80% of the denoising steps when left unset.
    """

    step_size: float | None = None
    n_inner_steps: int = 3
    t_start: int | None = None
    t_end: int | None = None
    per_source_weight: Mapping[str, float] = field(default_factory=dict)
    w_c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "per_source_weight", dict(self.per_source_weight))
        if self.step_size is not None and not self.step_size > 0:
            raise BadValue(f"step_size must be positive, got {self.step_size}")
        if self.n_inner_steps < 0:
            raise BadValue(f"n_inner_steps must be >= 0, got {self.n_inner_steps}")
        if self.t_start is not None and self.t_end is not None:
            if not self.t_start >= self.t_end >= 0:
                raise BadValue(
                    f"need t_start >= t_end >= 0, got ({self.t_start}, {self.t_end})"
                )
        for sid, w in self.per_source_weight.items():
            if not np.isfinite(w) or w < 0:
                raise BadValue(f"weight for {sid!r} must be finite and >= 0, got {w}")
        if not self.w_c >= 0:
            raise BadValue(f"w_c must be non-negative, got {self.w_c}")

    def window(self, n_steps: int) -> tuple[int, int]:
        start = min(self.t_start, n_steps) if self.t_start is not None else n_steps
        end = self.t_end if self.t_end is not None else max(1, n_steps - int(0.8 * n_steps) + 1)
        if end > start:
            raise BadValue(f"guidance window empty: t_end {end} > t_start {start}")
        return start, end


class TargetRegions:
    """Target-side pair regions per source, compiled once and reused across timesteps."""

    def __init__(self, target_masks: Mapping[str, MaskTrack], n_frames: int | None = None):
        subjects = {sid: t for sid, t in target_masks.items() if sid != BACKGROUND_ID}
        tracks = list(target_masks.values())
        if not tracks:
            raise BadValue("target masks must not be empty")
        shape = tracks[0].data.shape
        for t in tracks:
            if t.data.shape != shape:
                raise DimMismatch(f"target mask shapes differ: {t.data.shape} vs {shape}")
        self.n_frames = n_frames if n_frames is not None else shape[0]
        self.spatial = shape[1:]
        # source_id -> {(i, j): (flat indices, area)} for i < j
        self.pairs: dict[str, dict[tuple[int, int], tuple[np.ndarray, int]]] = {}
        for sid, track in target_masks.items():
            others = [t for osid, t in subjects.items() if osid != sid]
            table: dict[tuple[int, int], tuple[np.ndarray, int]] = {}
            for i in range(self.n_frames):
                for j in range(i + 1, self.n_frames):
                    if sid == BACKGROUND_ID:
                        region = background_pair_region(track, i, j)
                    else:
                        region = pair_region(track, others, i, j)
                    idx = np.flatnonzero(region.ravel())
                    if idx.size:
                        table[(i, j)] = (idx, int(idx.size))
            self.pairs[sid] = table

    def source_ids(self) -> list[str]:
        return list(self.pairs.keys())


@dataclass(frozen=True)
class _PairTerm:
    i: int
    j: int
    idx: np.ndarray
    area: int
    ref: np.ndarray  # reference delta, shape (n_channels,)


@dataclass(frozen=True)
class _SourceTerms:
    source_id: str
    weight: float
    pairs: tuple[_PairTerm, ...]


class GuidanceTarget:
    """Reference descriptors bound to target-side regions and source weights.

    Every referenced source must have a target mask track; the enforced
    pair set per source is the intersection of reference-valid pairs and
    non-empty target regions.
    """

    def __init__(
        self,
        references: Sequence[MotionDescriptor],
        target_masks: Mapping[str, MaskTrack] | None = None,
        *,
        regions: TargetRegions | None = None,
        weights: Mapping[str, float] | None = None,
        feature_map: FeatureMap | None = None,
    ):
        if regions is None:
            if target_masks is None:
                raise BadValue("provide target_masks or precompiled regions")
            regions = TargetRegions(target_masks)
        self.regions = regions
        self.references = list(references)
        self.weights = dict(weights or {})
        self.feature_map = feature_map
        terms: list[_SourceTerms] = []
        for ref in sorted(self.references, key=lambda d: d.source_id):
            if ref.source_id not in regions.pairs:
                if ref.source_id == BACKGROUND_ID:
                    raise MissingBackground("no target-side background mask for reference")
                raise UnknownSubject(f"no target-side mask for source {ref.source_id!r}")
            table = regions.pairs[ref.source_id]
            pair_terms = []
            for (i, j), (idx, a) in sorted(table.items()):
                if not ref.has_pair(i, j):
                    continue
                pair_terms.append(_PairTerm(i, j, idx, a, ref.delta(i, j)))
            terms.append(
                _SourceTerms(
                    ref.source_id,
                    float(self.weights.get(ref.source_id, 1.0)),
                    tuple(pair_terms),
                )
            )
        self._terms = tuple(terms)

    def with_references(self, references: Sequence[MotionDescriptor]) -> "GuidanceTarget":
        return GuidanceTarget(
            references,
            regions=self.regions,
            weights=self.weights,
            feature_map=self.feature_map,
        )

    def enforced_pair_count(self) -> int:
        return sum(len(s.pairs) for s in self._terms)

    def terms(self) -> tuple[_SourceTerms, ...]:
        return self._terms


def _check_latents(z: LatentVideo, target: GuidanceTarget) -> np.ndarray:
    data = z.data.astype(np.float64, copy=False)
    if (z.n_frames, z.height, z.width) != (
        target.regions.n_frames,
        *target.regions.spatial,
    ):
        raise DimMismatch(
            f"latents {z.shape} do not match target regions "
            f"({target.regions.n_frames}, *, {target.regions.spatial})"
        )
    return data


def _scale_vector(target: GuidanceTarget, n_channels: int) -> np.ndarray | None:
    if target.feature_map is None:
        return None
    return target.feature_map.scale_vector(n_channels)


def guidance_loss(target_latents: LatentVideo, target: GuidanceTarget) -> float:
    """Weighted sum of squared delta mismatches over all enforced pairs."""
    data = _check_latents(target_latents, target)
    if target.enforced_pair_count() == 0:
        raise NoValidPairs("no pair is valid on both the reference and target side")
    flat = data.reshape(data.shape[0], data.shape[1], -1)
    scale = _scale_vector(target, data.shape[1])
    total = 0.0
    for source in target.terms():
        for term in source.pairs:
            means_i = flat[term.i][:, term.idx].sum(axis=1) / term.area
            means_j = flat[term.j][:, term.idx].sum(axis=1) / term.area
            delta = means_i - means_j
            if scale is not None:
                delta = delta * scale
            r = delta - term.ref
            total += source.weight * float(r @ r)
    return total


def guidance_gradient(target_latents: LatentVideo, target: GuidanceTarget) -> np.ndarray:
    """Exact gradient of the guidance loss with respect to every latent cell."""
    _, grad = loss_and_gradient(target_latents, target)
    return grad


def loss_and_gradient(
    target_latents: LatentVideo, target: GuidanceTarget
) -> tuple[float, np.ndarray]:
    data = _check_latents(target_latents, target)
    if target.enforced_pair_count() == 0:
        raise NoValidPairs("no pair is valid on both the reference and target side")
    f, c, h, w = data.shape
    flat = data.reshape(f, c, -1)
    grad = np.zeros((f, c, h * w))
    scale = _scale_vector(target, c)
    total = 0.0
    for source in target.terms():
        for term in source.pairs:
            means_i = flat[term.i][:, term.idx].sum(axis=1) / term.area
            means_j = flat[term.j][:, term.idx].sum(axis=1) / term.area
            delta = means_i - means_j
            if scale is not None:
                delta = delta * scale
            r = delta - term.ref
            total += source.weight * float(r @ r)
            coeff = 2.0 * source.weight * r / term.area
            if scale is not None:
                coeff = coeff * scale
            grad[term.i][:, term.idx] += coeff[:, None]
            grad[term.j][:, term.idx] -= coeff[:, None]
    return total, grad.reshape(f, c, h, w)


def stable_step_size(target: GuidanceTarget) -> float:
    """1/L with L = 4 * sum over sources of weight * n_pairs / min_area.

    L upper-bounds the largest Hessian eigenvalue of the quadratic (per
    channel, via the trace), so gradient descent with this step cannot
    increase the loss.
    """
    total = 0.0
    min_area = None
    max_scale2 = 1.0
    if target.feature_map is not None:
        s = np.asarray(target.feature_map.scale, dtype=np.float64)
        max_scale2 = float(np.max(s * s)) if s.size else 1.0
    for source in target.terms():
        if not source.pairs:
            continue
        a = min(t.area for t in source.pairs)
        min_area = a if min_area is None else min(min_area, a)
        total += source.weight * len(source.pairs)
    if min_area is None or total == 0.0:
        raise NoValidPairs("cannot size a step with no enforced pairs")
    lipschitz = 4.0 * total / min_area * max_scale2
    return 1.0 / lipschitz


def guided_update(
    target_latents: LatentVideo,
    target: GuidanceTarget,
    config: GuidanceConfig,
) -> tuple[LatentVideo, list[float]]:
    """Run ``n_inner_steps`` of steepest descent on the guidance loss.

    Returns the updated latents and the loss trace: the value before any
    step followed by the value after each step.
    """
    z = target_latents.data.astype(np.float64, copy=True)
    step = config.step_size if config.step_size is not None else stable_step_size(target)
    losses: list[float] = []
    current = LatentVideo(z)
    for _ in range(config.n_inner_steps):
        loss, grad = loss_and_gradient(current, target)
        losses.append(loss)
        z = z - step * grad
        current = LatentVideo(z)
    losses.append(guidance_loss(current, target))
    return current, losses
