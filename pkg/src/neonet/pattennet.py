"""Attention classifier on frozen VAE encoder features.

Features are the encoder mean head. Each dual attention block applies channel
attention, then spatial attention; a global average pool and one affine
layer produce the PNI logit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import volgrid as vg
from .errors import ConfigError, EmptySplitError, UndefinedMetricError
from .ldm import VaeParams, batch_mean, vae_encode
from .metrics import roc_auc
from .models import AblationConfig, ClassifierHistory, ClassifierSettings, PatchPair
from .volgrid import ConvLayer, Linear, Node

SPATIAL_KERNEL = 7
MAX_BLOCKS = 3


@dataclass
class DabParams:
    mlp_in: Linear | None = None
    mlp_out: Linear | None = None
    spatial: ConvLayer | None = None

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        out: list[tuple[str, Node]] = []
        if self.mlp_in is not None and self.mlp_out is not None:
            out += self.mlp_in.named_parameters(f"{prefix}.mlp_in")
            out += self.mlp_out.named_parameters(f"{prefix}.mlp_out")
        if self.spatial is not None:
            out += self.spatial.named_parameters(f"{prefix}.spatial")
        return out


def init_dab(
    rng: np.random.Generator,
    channels: int,
    reduction_ratio: int = 4,
    use_channel: bool = True,
    use_spatial: bool = True,
    dtype=np.float64,
) -> DabParams:
    hidden = max(1, channels // reduction_ratio)
    params = DabParams()
    if use_channel:
        params.mlp_in = Linear.create(rng, channels, hidden, name="mlp_in", dtype=dtype)
        params.mlp_out = Linear.create(rng, hidden, channels, name="mlp_out", dtype=dtype)
    if use_spatial:
        params.spatial = ConvLayer.create(rng, 2, 1, SPATIAL_KERNEL, name="spatial", dtype=dtype)
    return params


def channel_attention(features: Node, mlp_in: Linear, mlp_out: Linear) -> Node:
    """sigma(MLP(avg pool) + MLP(max pool)) with one shared MLP -> [C]."""

    def mlp(v: Node) -> Node:
        return mlp_out(vg.relu(mlp_in(v)))

    return vg.sigmoid(
        vg.add(mlp(vg.global_pool(features, "avg")), mlp(vg.global_pool(features, "max")))
    )


def spatial_attention(features: Node, conv: ConvLayer) -> Node:
    """sigma(conv7([avg_c; max_c])) -> [1, D, H, W]."""
    pooled = vg.concat([vg.channel_pool(features, "avg"), vg.channel_pool(features, "max")])
    return vg.sigmoid(conv(pooled))


def dab(features: Node, params: DabParams) -> Node:
    out = features
    if params.mlp_in is not None and params.mlp_out is not None:
        out = vg.scale_channels(out, channel_attention(out, params.mlp_in, params.mlp_out))
    if params.spatial is not None:
        out = vg.scale_spatial(out, spatial_attention(out, params.spatial))
    return out


@dataclass
class ClassifierParams:
    encoder: VaeParams
    dabs: list[DabParams]
    head: Linear
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def named_parameters(self) -> list[tuple[str, Node]]:
        """Trainable parameters only; the encoder is referenced, never owned."""
        out: list[tuple[str, Node]] = []
        for i, block in enumerate(self.dabs):
            out += block.named_parameters(f"classifier.dab{i}")
        out += self.head.named_parameters("classifier.head")
        return out

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]


def ablate(
    config: AblationConfig,
    encoder: VaeParams,
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> ClassifierParams:
    """Build a classifier variant: DAB count 0..3, optionally one attention only."""
    if config.channel_only and config.spatial_only:
        raise ConfigError("channel_only and spatial_only cannot both be set")
    if not 0 <= config.dab_count <= MAX_BLOCKS:
        raise ConfigError(f"dab_count must be in 0..{MAX_BLOCKS}, got {config.dab_count}")
    if config.reduction_ratio < 1:
        raise ConfigError(f"reduction_ratio must be >= 1, got {config.reduction_ratio}")
    rng = rng or np.random.default_rng(0)
    channels = encoder.latent_channels
    dabs = [
        init_dab(
            rng,
            channels,
            config.reduction_ratio,
            use_channel=not config.spatial_only,
            use_spatial=not config.channel_only,
            dtype=dtype,
        )
        for _ in range(config.dab_count)
    ]
    head = Linear.create(rng, channels, 1, name="head", dtype=dtype)
    return ClassifierParams(encoder, dabs, head, config)


def init_classifier(encoder: VaeParams, rng: np.random.Generator | None = None) -> ClassifierParams:
    return ablate(AblationConfig(), encoder, rng)


def encode_features(image: np.ndarray, encoder: VaeParams) -> np.ndarray:
    """Frozen mean-head features of one patch image."""
    mu, _ = vae_encode(image.astype(encoder.enc_in.kernel.value.dtype), encoder)
    return mu.value.copy()


def classifier_logit(features: np.ndarray | Node, params: ClassifierParams) -> Node:
    f = features if isinstance(features, Node) else vg.constant(
        features, dtype=params.head.weights.value.dtype
    )
    for block in params.dabs:
        f = dab(f, block)
    return params.head(vg.global_pool(f, "avg"))


def pattennet_forward(patch: PatchPair, params: ClassifierParams) -> float:
    logit = classifier_logit(encode_features(patch.image, params.encoder), params)
    return vg.sigmoid(logit).item()


def predict(patches: Sequence[PatchPair], params: ClassifierParams) -> list[float]:
    return [pattennet_forward(p, params) for p in patches]


class EarlyStopping:
    """Tracks the best validation AUC; strict improvement only."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best_auc = float("-inf")
        self.best_epoch = 0

    def update(self, epoch: int, auc: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop) after ``epoch`` (1-based)."""
        if auc > self.best_auc:
            self.best_auc, self.best_epoch = auc, epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


def train_classifier(
    train: Sequence[PatchPair],
    val: Sequence[PatchPair],
    encoder: VaeParams,
    settings: ClassifierSettings,
    ablation: AblationConfig | None = None,
    progress=None,
) -> tuple[ClassifierParams, ClassifierHistory]:
    """BCE training with early stopping on validation AUC; returns the best epoch."""
    if not train:
        raise EmptySplitError("train_classifier: the training split is empty")
    val_labels = [p.pni for p in val]
    if len(set(val_labels)) < 2:
        raise UndefinedMetricError("validation split needs both classes for AUC")

    dtype = np.dtype(settings.dtype)
    rng = np.random.default_rng(settings.seed)
    params = ablate(ablation or AblationConfig(), encoder, rng, dtype=dtype)
    train_features = [encode_features(p.image, encoder) for p in train]
    val_features = [encode_features(p.image, encoder) for p in val]
    targets = [float(p.pni) for p in train]

    opt = vg.AdamW(params.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    stopper = EarlyStopping(settings.patience)
    history = ClassifierHistory()
    best = [p.value.copy() for p in opt.params]

    for epoch in range(1, settings.epochs + 1):
        order = rng.permutation(len(train_features))
        epoch_losses = []
        for lo in range(0, len(order), settings.batch):
            opt.zero_grad()
            losses = [
                vg.bce_with_logits(classifier_logit(train_features[i], params), targets[i])
                for i in order[lo : lo + settings.batch]
            ]
            loss = batch_mean(losses)
            epoch_losses.append(loss.item())
            if opt.params:
                vg.backward(loss)
                opt.step()
        scores = [vg.sigmoid(classifier_logit(f, params)).item() for f in val_features]
        auc = roc_auc(scores, val_labels)
        history.train_losses.append(float(np.mean(epoch_losses)))
        history.val_aucs.append(auc)
        improved, stop = stopper.update(epoch, auc)
        if improved:
            best = [p.value.copy() for p in opt.params]
        if progress is not None:
            progress(epoch, auc)
        history.stopped_epoch = epoch
        if stop:
            break

    for p, v in zip(opt.params, best):
        p.value[...] = v
    history.best_epoch, history.best_auc = stopper.best_epoch, stopper.best_auc
    return params, history
