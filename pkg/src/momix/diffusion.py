"""Deterministic DDIM inversion and sampling over a pluggable denoiser.

Inversion walks a clean latent video up the noise schedule using the
denoiser's own predictions and keeps every intermediate latent, because
guidance compares reference and target features at matching timesteps.
Sampling walks back down, optionally correcting the latents with the
motion-guidance update before each denoising step.

The stand-in denoiser is a Gaussian mixture over an atlas of clean
latent videos: its noise prediction comes from the closed-form posterior
mean of the mixture at the current noise level, so samples are pulled
toward plausible videos while remaining cheap and fully deterministic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import BadValue, DimMismatch, IoFailure, NonFinite
from .guidance import GuidanceConfig, GuidanceTarget, guided_update
from .features import MotionDescriptor
from .tensors import LatentVideo, load_tensor, save_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar[0..n_steps], strictly decreasing from 1."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.alpha_bar, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise DimMismatch(f"alpha_bar must be a 1-D vector, got shape {arr.shape}")
        if arr[0] != 1.0:
            raise BadValue(f"alpha_bar[0] must be 1.0, got {arr[0]}")
        if np.any(arr <= 0) or np.any(arr > 1):
            raise BadValue("alpha_bar values must lie in (0, 1]")
        if arr.size > 1 and not np.all(np.diff(arr) < 0):
            raise BadValue("alpha_bar must be strictly decreasing")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "alpha_bar", arr)

    @property
    def n_steps(self) -> int:
        return self.alpha_bar.size - 1

    @classmethod
    def default(cls, n_steps: int = 20, power: float = 2.0, floor: float = 1e-4) -> "NoiseSchedule":
        """alpha_bar[t] = floor + (1 - floor) * (1 - t/(n+1))**power.

        The affine floor keeps the sequence strictly decreasing even when
        the raw power curve would dip below the floor.
        """
        if n_steps < 0:
            raise BadValue(f"n_steps must be >= 0, got {n_steps}")
        t = np.arange(n_steps + 1, dtype=np.float64)
        base = (1.0 - t / (n_steps + 1)) ** power
        return cls(floor + (1.0 - floor) * base)


class Denoiser(Protocol):
    """Deterministic map (latents, timestep) -> predicted noise of identical shape."""

    def predict_noise(self, latents: LatentVideo, t: int) -> np.ndarray: ...


class ZeroDenoiser:
    """Predicts zero noise everywhere; collapses both recursions to pure scalings."""

    def predict_noise(self, latents: LatentVideo, t: int) -> np.ndarray:
        return np.zeros(latents.shape)


class GaussianAtlasDenoiser:
    """Noise prediction from the posterior mean of a Gaussian mixture.

    Components sit on the atlas members with isotropic variance
    ``bandwidth**2``. At noise level alpha_bar the observation model is
    z = sqrt(ab) x + sqrt(1-ab) eps, so the posterior over x given z is a
    re-weighted mixture whose mean has a closed form; the predicted noise
    is read back from the forward relation. At t = 0 there is no noise to
    predict and the output is zero.
    """

    def __init__(
        self,
        atlas: Sequence[LatentVideo],
        schedule: NoiseSchedule,
        bandwidth: float = 0.5,
    ):
        if not atlas:
            raise BadValue("atlas must contain at least one latent video")
        shape = atlas[0].shape
        for member in atlas:
            if member.shape != shape:
                raise DimMismatch(f"atlas member shape {member.shape} != {shape}")
        if not bandwidth > 0:
            raise BadValue(f"bandwidth must be positive, got {bandwidth}")
        self.members = np.stack([m.data.astype(np.float64) for m in atlas])
        self.schedule = schedule
        self.bandwidth = float(bandwidth)

    def posterior_mean(self, latents: LatentVideo, t: int) -> np.ndarray:
        z = latents.data.astype(np.float64, copy=False)
        ab = float(self.schedule.alpha_bar[t])
        c = np.sqrt(ab)
        var = ab * self.bandwidth**2 + (1.0 - ab)
        diffs = (z[None] - c * self.members).reshape(self.members.shape[0], -1)
        d2 = np.einsum("kn,kn->k", diffs, diffs)
        logw = -d2 / (2.0 * var)
        logw -= logw.max()
        w = np.exp(logw)
        w /= w.sum()
        mean_member = np.einsum("k,k...->...", w, self.members)
        shrink = c * self.bandwidth**2 / var
        return mean_member + shrink * (z - c * mean_member)

    def predict_noise(self, latents: LatentVideo, t: int) -> np.ndarray:
        ab = float(self.schedule.alpha_bar[t])
        rem = 1.0 - ab
        if rem <= 1e-12:
            return np.zeros(latents.shape)
        x_hat = self.posterior_mean(latents, t)
        z = latents.data.astype(np.float64, copy=False)
        return (z - np.sqrt(ab) * x_hat) / np.sqrt(rem)


def _predict(denoiser: Denoiser, z: np.ndarray, t: int) -> np.ndarray:
    eps = denoiser.predict_noise(LatentVideo(z), t)
    if isinstance(eps, LatentVideo):  # tolerate wrapped returns
        eps = eps.data
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise DimMismatch(f"denoiser returned shape {eps.shape}, expected {z.shape}")
    if not np.all(np.isfinite(eps)):
        raise NonFinite(f"denoiser produced non-finite values at t={t}")
    return eps


def ddim_invert(
    z0: LatentVideo, schedule: NoiseSchedule, denoiser: Denoiser
) -> list[LatentVideo]:
    """Deterministic inversion from t=0 to t=n_steps; returns the full trajectory."""
    ab = schedule.alpha_bar
    z = z0.data.astype(np.float64, copy=True)
    trajectory = [LatentVideo(z)]
    for t in range(schedule.n_steps):
        eps = _predict(denoiser, z, t)
        x0_hat = (z - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        z = np.sqrt(ab[t + 1]) * x0_hat + np.sqrt(1.0 - ab[t + 1]) * eps
        if not np.all(np.isfinite(z)):
            raise NonFinite(f"inversion produced non-finite latents at t={t + 1}")
        trajectory.append(LatentVideo(z))
    return trajectory


@dataclass
class SamplingGuidance:
    """Everything the sampler needs to run guided updates.

    ``references_by_t`` maps each guided timestep to the post-recompose
    reference descriptors extracted from the inversion trajectory at that
    same timestep. The trace records every inner-step loss.
    """

    config: GuidanceConfig
    target: GuidanceTarget
    references_by_t: Mapping[int, Sequence[MotionDescriptor]]
    trace: list[dict] = field(default_factory=list)


def ddim_sample(
    zT: LatentVideo,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    guidance: SamplingGuidance | None = None,
) -> LatentVideo:
    """Deterministic reverse recursion from t=n_steps down to 0.

    When guidance is active at a timestep, the latents are corrected with
    the motion-guidance update before the denoising step so the denoiser
    itself stays untouched.
    """
    ab = schedule.alpha_bar
    z = zT.data.astype(np.float64, copy=True)
    window = None
    if guidance is not None:
        window = guidance.config.window(schedule.n_steps)
    for t in range(schedule.n_steps, 0, -1):
        if guidance is not None and window[1] <= t <= window[0]:
            refs = guidance.references_by_t.get(t)
            if refs is None:
                log.warning("no reference descriptors for timestep %d; skipping guidance", t)
            else:
                updated, losses = guided_update(
                    LatentVideo(z), guidance.target.with_references(refs), guidance.config
                )
                z = updated.data.astype(np.float64, copy=True)
                for k, value in enumerate(losses):
                    guidance.trace.append({"timestep": t, "inner_step": k, "loss": value})
        eps = _predict(denoiser, z, t)
        x0_hat = (z - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
        z = np.sqrt(ab[t - 1]) * x0_hat + np.sqrt(1.0 - ab[t - 1]) * eps
        if not np.all(np.isfinite(z)):
            raise NonFinite(f"sampling produced non-finite latents at t={t - 1}")
    return LatentVideo(z)


def make_initial_noise(
    reference_zT: LatentVideo, mode: str = "shared", seed: int = 0
) -> LatentVideo:
    """Initial latents for sampling: the reference terminal, or seeded fresh noise."""
    if mode == "shared":
        return reference_zT
    if mode == "fresh":
        rng = np.random.default_rng(np.random.PCG64(seed))
        return LatentVideo(rng.standard_normal(reference_zT.shape))
    raise BadValue(f"unknown initial-noise mode {mode!r}")


# --- trajectory archive -----------------------------------------------------


def save_trajectory(trajectory: Sequence[LatentVideo], schedule: NoiseSchedule, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(trajectory) != schedule.n_steps + 1:
        raise DimMismatch(
            f"trajectory has {len(trajectory)} entries, schedule wants {schedule.n_steps + 1}"
        )
    files = {}
    for t, lat in enumerate(trajectory):
        name = f"t{t:03d}.cmt"
        save_tensor(lat, out_dir / name)
        files[str(t)] = name
    index = {
        "n_steps": schedule.n_steps,
        "alpha_bar": [float(a) for a in schedule.alpha_bar],
        "files": files,
    }
    try:
        (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write trajectory index: {exc}") from exc


def load_trajectory(dir_path) -> tuple[list[LatentVideo], NoiseSchedule]:
    dir_path = Path(dir_path)
    try:
        index = json.loads((dir_path / "index.json").read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read trajectory index in {dir_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadValue(f"{dir_path}: invalid trajectory index: {exc}") from exc
    schedule = NoiseSchedule(np.asarray(index["alpha_bar"], dtype=np.float64))
    n = int(index["n_steps"])
    trajectory = []
    for t in range(n + 1):
        rel = index["files"][str(t)]
        trajectory.append(load_tensor(dir_path / rel))
    return trajectory, schedule
