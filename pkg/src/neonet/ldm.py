"""Latent diffusion core: 3D VAE, DDPM schedule, latent U-Net denoiser.

Latents live on a 4x spatially downsampled grid with ``latent_channels``
channels. Conv stacks use relu and no normalisation layers. The diffusion
model is trained on reparameterized VAE samples; features for the classifier
use the mean head only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import volgrid as vg
from .errors import EmptySplitError, ShapeError
from .models import PatchPair, TrainingHistory, TrainSettings
from .volgrid import ConvLayer, Linear, Node

KL_WEIGHT = 1e-7
LOGVAR_FLOOR = -80.0

Progress = Callable[[int, float], None]


# ── noise schedule ─────────────────────────────────────────────────────


@dataclass
class NoiseSchedule:
    """Arrays indexed 0..T; index 0 is the clean state (beta 0, alpha_bar 1)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas) - 1

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ValueError(f"timestep {t} outside [1, {self.steps}]")


def make_schedule(
    steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind: {kind}")
    if steps < 1:
        raise ValueError(f"schedule needs at least one step, got {steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, steps)])
    if steps == 1:
        betas[1] = beta_start
    alphas = 1.0 - betas
    # Kahan-compensated running sum of log(alpha) keeps alpha_bar accurate for large T
    alpha_bars = np.ones(steps + 1)
    acc, comp = 0.0, 0.0
    for t in range(1, steps + 1):
        term = math.log1p(-betas[t]) - comp
        new = acc + term
        comp = (new - acc) - term
        acc = new
        alpha_bars[t] = math.exp(acc)
    return NoiseSchedule(betas, alphas, alpha_bars)


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    """Rebuild a schedule from stored betas (index 0 included)."""
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.exp(np.concatenate([[0.0], np.cumsum(np.log1p(-betas[1:]))]))
    return NoiseSchedule(betas, alphas, alpha_bars)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form q(z_t | z_0) draw with the supplied noise."""
    schedule.check_step(t)
    ab = schedule.alpha_bars[t]
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def timestep_embedding(t: int, dim: int, dtype=np.float64) -> Node:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return vg.constant(emb.astype(dtype))


# ── VAE ────────────────────────────────────────────────────────────────


@dataclass
class VaeParams:
    enc_in: ConvLayer
    enc_down1: ConvLayer
    enc_down2: ConvLayer
    mu_head: ConvLayer
    logvar_head: ConvLayer
    dec_in: ConvLayer
    dec_up1: ConvLayer
    dec_up2: ConvLayer
    dec_out: ConvLayer

    ENCODER = ("enc_in", "enc_down1", "enc_down2", "mu_head", "logvar_head")
    DECODER = ("dec_in", "dec_up1", "dec_up2", "dec_out")

    @property
    def latent_channels(self) -> int:
        return self.mu_head.kernel.shape[0]

    def named_parameters(self) -> list[tuple[str, Node]]:
        out: list[tuple[str, Node]] = []
        for name in self.ENCODER + self.DECODER:
            out += getattr(self, name).named_parameters(f"vae.{name}")
        return out

    def encoder_parameters(self) -> list[Node]:
        return [p for name in self.ENCODER for _, p in getattr(self, name).named_parameters(name)]

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]


def init_vae(
    rng: np.random.Generator,
    latent_channels: int = 4,
    channels: tuple[int, int] = (8, 16),
    zero_heads: bool = False,
    dtype=np.float64,
) -> VaeParams:
    c1, c2 = channels
    cz = latent_channels
    return VaeParams(
        enc_in=ConvLayer.create(rng, 2, c1, 3, name="enc_in", dtype=dtype),
        enc_down1=ConvLayer.create(rng, c1, c2, 3, stride=2, name="enc_down1", dtype=dtype),
        enc_down2=ConvLayer.create(rng, c2, c2, 3, stride=2, name="enc_down2", dtype=dtype),
        mu_head=ConvLayer.create(rng, c2, cz, 1, zero=zero_heads, name="mu_head", dtype=dtype),
        logvar_head=ConvLayer.create(rng, c2, cz, 1, zero=zero_heads, name="logvar_head", dtype=dtype),
        dec_in=ConvLayer.create(rng, cz, c2, 3, name="dec_in", dtype=dtype),
        dec_up1=ConvLayer.create(rng, c2, c1, 3, name="dec_up1", dtype=dtype),
        dec_up2=ConvLayer.create(rng, c1, c1, 3, name="dec_up2", dtype=dtype),
        dec_out=ConvLayer.create(rng, c1, 2, 3, name="dec_out", dtype=dtype),
    )


def _input_node(x: np.ndarray | Node, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return vg.constant(np.asarray(x), dtype=like.value.dtype)


def vae_encode(x: np.ndarray | Node, params: VaeParams) -> tuple[Node, Node]:
    """Shared trunk, then mean and log-variance heads over the latent grid."""
    x = _input_node(x, params.enc_in.kernel)
    if x.value.ndim != 4:
        raise ShapeError(f"vae_encode: expected [2, D, H, W], got {x.shape}")
    for axis, extent in zip(("depth", "height", "width"), x.shape[1:]):
        if extent % 4:
            raise ShapeError(f"vae_encode: {axis} axis extent {extent} is not divisible by 4")
    h = vg.relu(params.enc_in(x))
    h = vg.relu(params.enc_down1(h))
    h = vg.relu(params.enc_down2(h))
    return params.mu_head(h), params.logvar_head(h)


def vae_decode(z: np.ndarray | Node, params: VaeParams) -> Node:
    z = _input_node(z, params.dec_in.kernel)
    spatial = z.shape[1:]
    h = vg.relu(params.dec_in(z))
    h = vg.relu(params.dec_up1(vg.upsample2(h, [2 * e for e in spatial])))
    h = vg.relu(params.dec_up2(vg.upsample2(h, [4 * e for e in spatial])))
    return params.dec_out(h)


def reparameterize(mu: Node | np.ndarray, logvar: Node | np.ndarray, rng: np.random.Generator) -> Node:
    """z = mu + exp(logvar / 2) * eps; the noise term vanishes where logvar < -80."""
    mu = mu if isinstance(mu, Node) else vg.constant(mu)
    logvar = logvar if isinstance(logvar, Node) else vg.constant(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape} and logvar {logvar.shape} differ")
    eps = rng.standard_normal(mu.shape).astype(mu.value.dtype)
    live = (logvar.value >= LOGVAR_FLOOR).astype(mu.value.dtype)
    std = vg.elementwise(vg.scale(logvar, 0.5), "exp")
    return vg.add(mu, vg.mul(std, vg.constant(eps * live, dtype=mu.value.dtype)))


def vae_loss(x: Node | np.ndarray, x_hat: Node, mu: Node, logvar: Node) -> Node:
    """Mean absolute error plus 1e-7 times the per-element KL to N(0, I)."""
    x = _input_node(x, x_hat)
    recon = vg.l1(x_hat, x)
    ones = vg.constant(np.ones(mu.shape, dtype=mu.value.dtype))
    kl_terms = vg.sub(
        vg.sub(vg.add(vg.elementwise(mu, "square"), vg.elementwise(logvar, "exp")), ones),
        logvar,
    )
    kl = vg.scale(vg.mean(kl_terms), 0.5)
    return vg.add(recon, vg.scale(kl, KL_WEIGHT))


def vae_reconstruct(x: np.ndarray, params: VaeParams) -> np.ndarray:
    mu, _ = vae_encode(x, params)
    return vae_decode(mu, params).value


# ── latent denoiser ────────────────────────────────────────────────────


@dataclass
class DenoiserBlock:
    """conv -> + time projection (as extra bias) -> relu"""

    conv: ConvLayer
    time_proj: Linear

    def __call__(self, h: Node, temb: Node) -> Node:
        return vg.relu(self.conv(h, extra_bias=self.time_proj(temb)))

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        return self.conv.named_parameters(f"{prefix}.conv") + self.time_proj.named_parameters(
            f"{prefix}.time"
        )


@dataclass
class DenoiserParams:
    encoder_blocks: list[DenoiserBlock]  # in, down1, down2
    mid: DenoiserBlock
    decoder_blocks: list[DenoiserBlock]  # up2, up1
    out: ConvLayer
    time_dim: int

    @property
    def skip_channels(self) -> list[int]:
        return [b.conv.kernel.shape[0] for b in self.encoder_blocks]

    def named_parameters(self) -> list[tuple[str, Node]]:
        out: list[tuple[str, Node]] = []
        for i, block in enumerate(self.encoder_blocks):
            out += block.named_parameters(f"denoiser.enc{i}")
        out += self.mid.named_parameters("denoiser.mid")
        for i, block in enumerate(self.decoder_blocks):
            out += block.named_parameters(f"denoiser.dec{i}")
        out += self.out.named_parameters("denoiser.out")
        return out

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]


def init_denoiser(
    rng: np.random.Generator,
    latent_channels: int = 4,
    channels: tuple[int, int, int] = (16, 32, 32),
    time_dim: int = 16,
    zero_output: bool = True,
    dtype=np.float64,
) -> DenoiserParams:
    c1, c2, c3 = channels
    cz = latent_channels

    def block(cin: int, cout: int, stride: int, name: str) -> DenoiserBlock:
        return DenoiserBlock(
            ConvLayer.create(rng, cin, cout, 3, stride=stride, name=name, dtype=dtype),
            Linear.create(rng, time_dim, cout, name=f"{name}.time", dtype=dtype),
        )

    return DenoiserParams(
        encoder_blocks=[block(cz, c1, 1, "enc0"), block(c1, c2, 2, "enc1"), block(c2, c3, 2, "enc2")],
        mid=block(c3, c3, 1, "mid"),
        decoder_blocks=[block(c3 + c2, c2, 1, "dec0"), block(c2 + c1, c1, 1, "dec1")],
        out=ConvLayer.create(rng, c1, cz, 3, zero=zero_output, name="out", dtype=dtype),
        time_dim=time_dim,
    )


def run_encoder_blocks(blocks: Sequence[DenoiserBlock], x: Node, temb: Node) -> list[Node]:
    """Outputs of each encoder-side block, in order."""
    outputs = []
    h = x
    for block in blocks:
        h = block(h, temb)
        outputs.append(h)
    return outputs


def denoiser_forward(
    params: DenoiserParams,
    z_t: np.ndarray | Node,
    t: int,
    residuals: Sequence[Node] | None = None,
) -> Node:
    """Predict the noise in ``z_t``; ``residuals`` are added to the encoder outputs."""
    x = _input_node(z_t, params.out.kernel)
    temb = timestep_embedding(t, params.time_dim, x.value.dtype)
    skips = run_encoder_blocks(params.encoder_blocks, x, temb)
    if residuals is not None:
        if len(residuals) != len(skips):
            raise ShapeError(f"denoiser: {len(residuals)} residuals for {len(skips)} blocks")
        skips = [vg.add(s, r) for s, r in zip(skips, residuals)]
    h0, h1, h2 = skips
    h = params.mid(h2, temb)
    up2, up1 = params.decoder_blocks
    h = up2(vg.concat([vg.upsample2(h, h1.shape[1:]), h1]), temb)
    h = up1(vg.concat([vg.upsample2(h, h0.shape[1:]), h0]), temb)
    return params.out(h)


def ldm_loss(
    z0: np.ndarray, t: int, eps: np.ndarray, params: DenoiserParams, schedule: NoiseSchedule
) -> Node:
    z_t = forward_diffuse(z0, t, eps, schedule)
    eps_hat = denoiser_forward(params, z_t, t)
    return vg.mse(eps_hat, vg.constant(eps, dtype=eps_hat.value.dtype))


Predictor = Callable[[np.ndarray, int], np.ndarray]


def ddpm_sample(
    schedule: NoiseSchedule,
    params: DenoiserParams,
    rng: np.random.Generator,
    shape: Sequence[int],
    predictor: Predictor | None = None,
) -> np.ndarray:
    """Ancestral sampling from z_T ~ N(0, I) with sigma_t^2 = beta_t.

    ``predictor`` overrides the noise estimate (the controlled forward passes
    one in); by default the unconditioned denoiser is used.
    """
    if predictor is None:
        def predictor(z: np.ndarray, t: int) -> np.ndarray:
            return denoiser_forward(params, z, t).value

    z = rng.standard_normal(tuple(shape))
    for t in range(schedule.steps, 0, -1):
        eps_hat = predictor(z, t)
        beta, alpha, ab = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
        z = (z - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            z = z + math.sqrt(beta) * rng.standard_normal(z.shape)
    return z


# ── training ───────────────────────────────────────────────────────────


def batch_mean(losses: Sequence[Node]) -> Node:
    acc = losses[0]
    for loss in losses[1:]:
        acc = vg.add(acc, loss)
    return vg.scale(acc, 1.0 / len(losses))


def _snapshot(params: Sequence[Node]) -> list[np.ndarray]:
    return [p.value.copy() for p in params]


def _restore(params: Sequence[Node], values: Sequence[np.ndarray]) -> None:
    for p, v in zip(params, values):
        p.value[...] = v


def fit(
    params: Sequence[Node],
    step_loss: Callable[[np.random.Generator], Node],
    settings: TrainSettings,
    progress: Progress | None = None,
) -> TrainingHistory:
    """Shared AdamW loop; keeps the best-loss parameters and restores them at the end."""
    rng = np.random.default_rng(settings.seed)
    opt = vg.AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay)
    history = TrainingHistory()
    best = _snapshot(opt.params)
    for step in range(settings.steps):
        opt.zero_grad()
        loss = step_loss(rng)
        value = loss.item()
        history.losses.append(value)
        if value < history.best_loss:
            history.best_loss, history.best_step = value, step
            best = _snapshot(opt.params)
        vg.backward(loss)
        opt.step()
        if progress is not None and (step % settings.log_every == 0 or step == settings.steps - 1):
            progress(step, value)
    _restore(opt.params, best)
    return history


def _draw_batch(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    return rng.choice(n, size=min(batch, n), replace=False)


def train_vae(
    patches: Sequence[PatchPair],
    settings: TrainSettings,
    latent_channels: int = 4,
    channels: tuple[int, int] = (8, 16),
    progress: Progress | None = None,
) -> tuple[VaeParams, TrainingHistory]:
    if not patches:
        raise EmptySplitError("train_vae: the training split is empty")
    dtype = np.dtype(settings.dtype)
    params = init_vae(np.random.default_rng(settings.seed), latent_channels, channels, dtype=dtype)
    images = [p.image.astype(dtype) for p in patches]

    def step_loss(rng: np.random.Generator) -> Node:
        losses = []
        for i in _draw_batch(rng, len(images), settings.batch):
            mu, logvar = vae_encode(images[i], params)
            z = reparameterize(mu, logvar, rng)
            losses.append(vae_loss(images[i], vae_decode(z, params), mu, logvar))
        return batch_mean(losses)

    history = fit(params.parameters(), step_loss, settings, progress)
    history.train_ids = [p.case_id for p in patches]
    return params, history


def encode_latents(
    patches: Sequence[PatchPair], vae: VaeParams, rng: np.random.Generator
) -> list[np.ndarray]:
    """Reparameterized latent sample per patch from the frozen VAE."""
    out = []
    for patch in patches:
        mu, logvar = vae_encode(patch.image.astype(vae.enc_in.kernel.value.dtype), vae)
        out.append(reparameterize(mu.value, logvar.value, rng).value)
    return out


def train_denoiser(
    latents: Sequence[np.ndarray],
    schedule: NoiseSchedule,
    settings: TrainSettings,
    channels: tuple[int, int, int] = (16, 32, 32),
    time_dim: int = 16,
    progress: Progress | None = None,
) -> tuple[DenoiserParams, TrainingHistory]:
    if not latents:
        raise EmptySplitError("train_denoiser: no training latents")
    dtype = np.dtype(settings.dtype)
    params = init_denoiser(
        np.random.default_rng(settings.seed + 1),
        latent_channels=latents[0].shape[0],
        channels=channels,
        time_dim=time_dim,
        dtype=dtype,
    )

    def step_loss(rng: np.random.Generator) -> Node:
        losses = []
        for i in _draw_batch(rng, len(latents), settings.batch):
            t = int(rng.integers(1, schedule.steps + 1))
            eps = rng.standard_normal(latents[i].shape).astype(dtype)
            losses.append(ldm_loss(latents[i], t, eps, params, schedule))
        return batch_mean(losses)

    history = fit(params.parameters(), step_loss, settings, progress)
    return params, history
