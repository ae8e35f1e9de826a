"""Mask-conditioned generation with a zero-initialised control branch.

The branch holds trainable copies of the denoiser's encoder-side blocks. The
condition enters through a zero 1x1x1 conv (Z1) added to the noisy latent;
each copied block's output goes through its own zero 1x1x1 conv (Z2) and is
added to the matching skip connection of the frozen trunk.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import volgrid as vg
from .errors import EmptySplitError, ShapeError
from .ldm import (
    DenoiserBlock,
    DenoiserParams,
    NoiseSchedule,
    Progress,
    VaeParams,
    batch_mean,
    ddpm_sample,
    denoiser_forward,
    fit,
    forward_diffuse,
    run_encoder_blocks,
    timestep_embedding,
    vae_decode,
)
from .models import PatchPair, TrainingHistory, TrainSettings
from .volgrid import ConvLayer, Node

CONDITION_FACTOR = 4
CONDITION_THRESHOLD = 0.5


def derive_seed(base: int, case_id: str, replica: int = 0) -> int:
    """Stable per-item seed, independent of execution order."""
    digest = hashlib.sha256(f"{base}:{case_id}:{replica}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ControlBranch:
    blocks: list[DenoiserBlock]
    z1: ConvLayer
    z2: list[ConvLayer]

    def named_parameters(self) -> list[tuple[str, Node]]:
        out: list[tuple[str, Node]] = []
        for i, block in enumerate(self.blocks):
            out += block.named_parameters(f"control.block{i}")
        out += self.z1.named_parameters("control.z1")
        for i, conv in enumerate(self.z2):
            out += conv.named_parameters(f"control.z2_{i}")
        return out

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]


@dataclass
class GenerativeBundle:
    """Everything needed to synthesise patches for one fold."""

    vae: VaeParams
    trunk: DenoiserParams
    branch: ControlBranch
    schedule: NoiseSchedule
    train_ids: list[str] = field(default_factory=list)


def init_control_branch(denoiser: DenoiserParams, condition_channels: int = 2) -> ControlBranch:
    blocks = copy.deepcopy(denoiser.encoder_blocks)
    for block in blocks:
        for _, p in block.named_parameters("copy"):
            p.requires_grad = True
            p.zero_grad()
    latent_channels = denoiser.out.kernel.shape[0]
    dtype = denoiser.out.kernel.value.dtype
    rng = np.random.default_rng(0)
    z1 = ConvLayer.create(rng, condition_channels, latent_channels, 1, zero=True, name="z1", dtype=dtype)
    z2 = [
        ConvLayer.create(rng, c, c, 1, zero=True, name=f"z2_{i}", dtype=dtype)
        for i, c in enumerate(denoiser.skip_channels)
    ]
    return ControlBranch(blocks, z1, z2)


def make_condition(label_patch: np.ndarray) -> np.ndarray:
    """Average-pool the binary label patch 4x per axis, then threshold at 0.5."""
    labels = np.asarray(label_patch, dtype=np.float64)
    c, *spatial = labels.shape
    for axis, extent in zip(("x", "y", "z"), spatial):
        if extent % CONDITION_FACTOR:
            raise ShapeError(f"make_condition: {axis} extent {extent} is not divisible by 4")
    f = CONDITION_FACTOR
    d, h, w = (e // f for e in spatial)
    pooled = labels.reshape(c, d, f, h, f, w, f).mean(axis=(2, 4, 6))
    return (pooled >= CONDITION_THRESHOLD).astype(np.float64)


def controlled_forward(
    x: np.ndarray | Node,
    condition: np.ndarray,
    t: int,
    trunk: DenoiserParams,
    branch: ControlBranch,
) -> Node:
    """Trunk noise prediction with the control residuals on its skips."""
    dtype = trunk.out.kernel.value.dtype
    x = x if isinstance(x, Node) else vg.constant(x, dtype=dtype)
    hint = branch.z1(vg.constant(condition, dtype=dtype))
    if hint.shape != x.shape:
        raise ShapeError(f"controlled_forward: Z1(c) has shape {hint.shape}, latent has {x.shape}")
    temb = timestep_embedding(t, trunk.time_dim, dtype)
    outputs = run_encoder_blocks(branch.blocks, vg.add(x, hint), temb)
    residuals = [z2(h) for z2, h in zip(branch.z2, outputs)]
    return denoiser_forward(trunk, x, t, residuals)


def controlnet_loss(
    z0: np.ndarray,
    condition: np.ndarray,
    t: int,
    eps: np.ndarray,
    trunk: DenoiserParams,
    branch: ControlBranch,
    schedule: NoiseSchedule,
) -> Node:
    z_t = forward_diffuse(z0, t, eps, schedule)
    eps_hat = controlled_forward(z_t, condition, t, trunk, branch)
    return vg.mse(eps_hat, vg.constant(eps, dtype=eps_hat.value.dtype))


def train_controlnet(
    patches: Sequence[PatchPair],
    latents: Sequence[np.ndarray],
    trunk: DenoiserParams,
    schedule: NoiseSchedule,
    settings: TrainSettings,
    progress: Progress | None = None,
) -> tuple[ControlBranch, TrainingHistory]:
    """Train a fresh branch against the frozen trunk."""
    if not patches:
        raise EmptySplitError("train_controlnet: the training split is empty")
    if len(patches) != len(latents):
        raise ShapeError(f"train_controlnet: {len(patches)} patches but {len(latents)} latents")
    conditions = [make_condition(p.labels) for p in patches]
    trunk_params = trunk.parameters()
    flags = [p.requires_grad for p in trunk_params]
    vg.set_trainable(trunk_params, False)
    branch = init_control_branch(trunk)
    dtype = np.dtype(settings.dtype)

    def step_loss(rng: np.random.Generator) -> Node:
        losses = []
        for i in rng.choice(len(latents), size=min(settings.batch, len(latents)), replace=False):
            t = int(rng.integers(1, schedule.steps + 1))
            eps = rng.standard_normal(latents[i].shape).astype(dtype)
            losses.append(controlnet_loss(latents[i], conditions[i], t, eps, trunk, branch, schedule))
        return batch_mean(losses)

    try:
        history = fit(branch.parameters(), step_loss, settings, progress)
    finally:
        for p, flag in zip(trunk_params, flags):
            p.requires_grad = flag
    history.train_ids = [p.case_id for p in patches]
    return branch, history


def generate_conditioned(
    donor: PatchPair,
    bundle: GenerativeBundle,
    rng: np.random.Generator,
    case_id: str,
) -> PatchPair:
    """Sample a latent under the donor's mask, decode it and re-mask the image."""
    condition = make_condition(donor.labels)
    shape = (bundle.trunk.out.kernel.shape[0], *condition.shape[1:])

    def predictor(z: np.ndarray, t: int) -> np.ndarray:
        return controlled_forward(z, condition, t, bundle.trunk, bundle.branch).value

    z0 = ddpm_sample(bundle.schedule, bundle.trunk, rng, shape, predictor)
    decoded = np.clip(vae_decode(z0, bundle.vae).value.astype(np.float64), 0.0, 1.0)

    peritumoral = donor.labels[0] > 0
    tumor = donor.labels[1] > 0
    t2 = np.where(tumor, decoded[1], 0.0)
    # tumor voxels carry the same intensity in both channels
    t1 = np.where(peritumoral, np.where(tumor, t2, decoded[0]), 0.0)
    return PatchPair(
        image=np.stack([t1, t2]),
        labels=donor.labels.copy(),
        pni=donor.pni,
        provenance="synthetic",
        case_id=case_id,
        donor_id=donor.case_id,
        crop_start=donor.crop_start,
    )
