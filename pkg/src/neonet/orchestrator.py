"""Stage pipeline: phantom cohort → TLCR patches → LDM → ControlNet → classifier.

Every stage records its config hash, timing and artifacts in
``run_manifest.yaml`` under the output root. A stage already recorded with
the current config hash is skipped unless forced, and a stage whose
prerequisites are missing names the command that produces them.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from . import checkpoint
from .cohort import (
    PhantomConfig,
    balance_fold,
    build_cohort,
    exclude_large_tumors,
    ladder_counts,
    read_cohort_manifest,
    stratified_kfold,
    write_cohort_manifest,
)
from .config import RunConfig
from .controlnet import GenerativeBundle, derive_seed, init_control_branch, train_controlnet
from .errors import ChecksumError, ConfigError, MissingStageError
from .ldm import (
    DenoiserParams,
    NoiseSchedule,
    VaeParams,
    encode_latents,
    init_denoiser,
    init_vae,
    make_schedule,
    schedule_from_betas,
    train_denoiser,
    train_vae,
    vae_reconstruct,
)
from .metrics import dice, fid_by_view, psnr, roc_auc, roc_curve, ssim
from .models import AblationConfig, BalanceLadder, FoldSplit, PatchPair, RunManifest, StageRecord, TrainingHistory
from .nifti import normalize_intensity, read_labels, read_volume, write_volume
from .output import format_value, print_metric_table, print_phase, print_progress, print_result, progress_reporter
from .pattennet import ClassifierParams, ablate, predict, train_classifier
from .tlcr import export_patch, load_patch, tlcr_crop

MANIFEST_NAME = "run_manifest.yaml"
STAGES = ("vae", "ldm", "controlnet", "classifier")
ABLATION_VARIANTS = (
    AblationConfig(dab_count=0),
    AblationConfig(dab_count=1),
    AblationConfig(dab_count=2),
    AblationConfig(dab_count=3),
    AblationConfig(dab_count=2, channel_only=True),
    AblationConfig(dab_count=2, spatial_only=True),
)


def ratio_tag(ratio: float) -> str:
    return f"r{ratio:g}"


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row.get(c, "")) for c in columns])
    return path


class Pipeline:
    """Runs stages against one output root and keeps its run manifest current."""

    def __init__(self, config: RunConfig, force: bool = False) -> None:
        self.config = config
        self.force = force
        self.root = config.output_root
        self.hash = config.config_hash()
        self.dtype = np.dtype(config.precision)
        self.manifest = self._load_manifest()

    # ── run manifest ──

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def _load_manifest(self) -> RunManifest:
        if not self.manifest_path.exists():
            return RunManifest(self.hash, self.config.seed)
        with open(self.manifest_path) as f:
            raw = yaml.safe_load(f) or {}
        stages = {k: StageRecord(**v) for k, v in (raw.get("stages") or {}).items()}
        return RunManifest(raw.get("config_hash", self.hash), raw.get("seed", self.config.seed), stages)

    def _save_manifest(self) -> None:
        self.manifest.config_hash, self.manifest.seed = self.hash, self.config.seed
        data = {
            "config_hash": self.manifest.config_hash,
            "seed": self.manifest.seed,
            "stages": {k: asdict(v) for k, v in sorted(self.manifest.stages.items())},
        }
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_name(MANIFEST_NAME + ".tmp")
        tmp.write_text(yaml.safe_dump(data, sort_keys=False, default_flow_style=False))
        os.replace(tmp, self.manifest_path)

    def is_current(self, key: str) -> bool:
        record = self.manifest.stages.get(key)
        return record is not None and record.config_hash == self.hash

    def require(self, key: str, command: str) -> None:
        if not self.is_current(key):
            raise MissingStageError(key, command)

    def run_stage(self, key: str, work: Callable[[], list[Path]]) -> bool:
        """Run ``work`` unless ``key`` is up to date; returns True when it ran."""
        if self.is_current(key) and not self.force:
            print_result(f"{key}: up to date")
            return False
        print_phase(f"Stage {key}")
        started = time.perf_counter()
        artifacts = work()
        self.manifest.stages[key] = StageRecord(
            self.hash,
            round(time.perf_counter() - started, 3),
            sorted(str(p.relative_to(self.root)) for p in artifacts),
        )
        self._save_manifest()
        print_result(f"{key}: done ({len(artifacts)} artifacts)")
        return True

    # ── paths and loaders ──

    def fold_dir(self, fold: int) -> Path:
        return self.root / f"fold{fold}"

    def ckpt_path(self, fold: int, name: str) -> Path:
        return self.fold_dir(fold) / f"{name}.ckpt"

    def folds(self) -> list[FoldSplit]:
        self.require("phantom", "phantom")
        rows = read_cohort_manifest(self.root / "cohort" / "manifest.tsv")
        ids = [r["case_id"] for r in rows]
        splits = []
        for fold in sorted({int(r["val_fold"]) for r in rows}):
            val = [r["case_id"] for r in rows if int(r["val_fold"]) == fold]
            held_out = set(val)
            splits.append(FoldSplit(fold, [i for i in ids if i not in held_out], val))
        return splits

    def fold(self, fold: int) -> FoldSplit:
        for split in self.folds():
            if split.fold == fold:
                return split
        raise ConfigError(f"fold {fold} does not exist (folds 1..{self.config.folds})")

    def balance_ladder(self) -> BalanceLadder:
        """The configured ratio grid with synthetic counts for each fold's training split."""
        splits = self.folds()
        rows = read_cohort_manifest(self.root / "cohort" / "manifest.tsv")
        labels = {r["case_id"]: int(r["class"]) for r in rows}
        ladder = BalanceLadder(tuple(self.config.ratios))
        for split in splits:
            ladder.counts[split.fold] = ladder_counts([labels[i] for i in split.train_ids], ladder.ratios)
        return ladder

    def patches(self) -> dict[str, PatchPair]:
        self.require("tlcr", "tlcr")
        directory = self.root / "patches"
        rows = read_cohort_manifest(self.root / "cohort" / "manifest.tsv")
        return {r["case_id"]: load_patch(directory, r["case_id"]) for r in rows}

    def _manifest_for(self, fold: int, split: FoldSplit, history: TrainingHistory, settings) -> dict:
        return {
            "seed": settings.seed,
            "config_hash": self.hash,
            "fold": fold,
            "train_ids": list(split.train_ids),
            "steps": len(history.losses),
            "final_loss": float(history.losses[-1]) if history.losses else None,
            "best_loss": float(history.best_loss),
        }

    def load_vae(self, fold: int) -> VaeParams:
        self.require(f"train.vae.fold{fold}", f"train --stage vae --fold {fold}")
        c = self.config
        vae = init_vae(np.random.default_rng(0), c.latent_channels, tuple(c.vae_channels), dtype=self.dtype)
        path = self.ckpt_path(fold, "vae")
        checkpoint.restore(vae.named_parameters(), checkpoint.load_checkpoint(path), str(path))
        return vae

    def load_denoiser(self, fold: int) -> tuple[DenoiserParams, NoiseSchedule]:
        self.require(f"train.ldm.fold{fold}", f"train --stage ldm --fold {fold}")
        c = self.config
        trunk = init_denoiser(
            np.random.default_rng(0), c.latent_channels, tuple(c.denoiser_channels), c.time_embed_dim, dtype=self.dtype
        )
        path = self.ckpt_path(fold, "ldm")
        blobs = checkpoint.load_checkpoint(path)
        checkpoint.restore(trunk.named_parameters(), blobs, str(path))
        if "schedule.betas" not in blobs:
            raise ChecksumError(str(path), "missing blob 'schedule.betas'")
        return trunk, schedule_from_betas(blobs["schedule.betas"])

    def load_bundle(self, fold: int) -> GenerativeBundle:
        self.require(f"train.controlnet.fold{fold}", f"train --stage controlnet --fold {fold}")
        vae = self.load_vae(fold)
        trunk, schedule = self.load_denoiser(fold)
        branch = init_control_branch(trunk)
        path = self.ckpt_path(fold, "controlnet")
        checkpoint.restore(branch.named_parameters(), checkpoint.load_checkpoint(path), str(path))
        train_ids = checkpoint.load_manifest(path).get("train_ids", [])
        return GenerativeBundle(vae, trunk, branch, schedule, train_ids)

    def load_classifier(self, fold: int, ratio: float) -> ClassifierParams:
        key = f"train.classifier.fold{fold}.{ratio_tag(ratio)}"
        self.require(key, f"train --stage classifier --fold {fold}")
        params = ablate(self.config.ablation(), self.load_vae(fold), dtype=self.dtype)
        path = self.ckpt_path(fold, f"classifier_{ratio_tag(ratio)}")
        checkpoint.restore(params.named_parameters(), checkpoint.load_checkpoint(path), str(path))
        return params

    def synthetic(self, fold: int, ratio: float) -> list[PatchPair]:
        self.require(f"generate.fold{fold}.{ratio_tag(ratio)}", f"generate --fold {fold} --ratio {ratio:g}")
        directory = self.fold_dir(fold) / f"synthetic_{ratio_tag(ratio)}"
        with open(directory / "index.yaml") as f:
            ids = (yaml.safe_load(f) or {}).get("case_ids", [])
        return [load_patch(directory, i) for i in ids]

    def _latents(self, fold: int, train: Sequence[PatchPair], vae: VaeParams) -> list[np.ndarray]:
        rng = np.random.default_rng(derive_seed(self.config.seed, f"latents.fold{fold}"))
        return encode_latents(train, vae, rng)

    # ── stages ──

    def phantom(self) -> None:
        c = self.config

        def work() -> list[Path]:
            cohort = build_cohort(
                c.seed, c.n_pos, c.n_neg, tuple(c.volume_dims),
                PhantomConfig(rim_amplitude=c.phantom_rim_amplitude), workers=c.workers,
            )
            if c.exclude_large_tumors:
                kept = exclude_large_tumors(cohort)
                print_progress(f"excluded {len(cohort.cases) - len(kept.cases)} large-tumor cases")
                cohort = kept
            splits = stratified_kfold(cohort, c.folds, c.seed)
            directory = self.root / "cohort"
            artifacts = []
            for case in cohort.cases:
                image = directory / f"{case.id}_image.nii.gz"
                labels = directory / f"{case.id}_labels.nii.gz"
                write_volume(case.volume, image)
                write_volume(case.labels, labels)
                artifacts += [image, labels]
            manifest = directory / "manifest.tsv"
            write_cohort_manifest(cohort, splits, manifest)
            pos, neg = cohort.counts()
            print_progress(f"{len(cohort.cases)} cases ({pos} PNI+, {neg} PNI-), {len(splits)} folds")
            return artifacts + [manifest]

        self.run_stage("phantom", work)

    def tlcr(self) -> None:
        self.require("phantom", "phantom")

        def work() -> list[Path]:
            directory = self.root / "cohort"
            artifacts: list[Path] = []
            for row in read_cohort_manifest(directory / "manifest.tsv"):
                case_id = row["case_id"]
                image = normalize_intensity(read_volume(directory / f"{case_id}_image.nii.gz", kind="volume"))
                labels = read_labels(directory / f"{case_id}_labels.nii.gz")
                patch = tlcr_crop(image, labels, self.config.crop, int(row["class"]), case_id)
                artifacts += export_patch(patch, self.root / "patches", image.spacing)
            return artifacts

        self.run_stage("tlcr", work)

    def train(self, stage: str, fold: int) -> None:
        if stage not in STAGES:
            raise ConfigError(f"unknown training stage '{stage}' (choose from {', '.join(STAGES)})")
        if stage == "classifier":
            self.train_classifier(fold, self.config.classifier_ratio)
            return
        split = self.fold(fold)
        patches = self.patches()
        train = [patches[i] for i in split.train_ids]
        c = self.config
        settings = c.train_settings(stage, fold)
        progress = progress_reporter(f"{stage} fold {fold}", c.verbose)

        def save(name: str, named, history: TrainingHistory) -> list[Path]:
            path = checkpoint.save_checkpoint(
                self.ckpt_path(fold, name), named, self._manifest_for(fold, split, history, settings)
            )
            curve = write_csv(
                self.fold_dir(fold) / f"loss_{name}.csv",
                ("step", "loss"),
                ({"step": i, "loss": v} for i, v in enumerate(history.losses)),
            )
            return [path, checkpoint.manifest_path(path), curve]

        def work_vae() -> list[Path]:
            vae, history = train_vae(train, settings, c.latent_channels, tuple(c.vae_channels), progress)
            print_progress(f"VAE loss {history.losses[0]:.6g} -> {history.best_loss:.6g}")
            return save("vae", vae.named_parameters(), history)

        def work_ldm() -> list[Path]:
            vae = self.load_vae(fold)
            schedule = make_schedule(c.schedule_steps, c.beta_start, c.beta_end)
            trunk, history = train_denoiser(
                self._latents(fold, train, vae), schedule, settings,
                tuple(c.denoiser_channels), c.time_embed_dim, progress,
            )
            named = trunk.named_parameters() + [("schedule.betas", schedule.betas)]
            return save("ldm", named, history)

        def work_controlnet() -> list[Path]:
            vae = self.load_vae(fold)
            trunk, schedule = self.load_denoiser(fold)
            branch, history = train_controlnet(
                train, self._latents(fold, train, vae), trunk, schedule, settings, progress
            )
            print_progress(f"ControlNet loss {history.losses[0]:.6g} -> {history.best_loss:.6g}")
            return save("controlnet", branch.named_parameters(), history)

        work = {"vae": work_vae, "ldm": work_ldm, "controlnet": work_controlnet}[stage]
        self.run_stage(f"train.{stage}.fold{fold}", work)

    def generate(self, fold: int, ratio: float) -> None:
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"ratio must be in [0, 1], got {ratio}")
        split = self.fold(fold)
        patches = self.patches()

        def work() -> list[Path]:
            bundle = self.load_bundle(fold)
            train, _ = balance_fold(split, patches, ratio, bundle, self.config.seed)
            synthetic = [p for p in train if p.provenance == "synthetic"]
            directory = self.fold_dir(fold) / f"synthetic_{ratio_tag(ratio)}"
            directory.mkdir(parents=True, exist_ok=True)
            artifacts: list[Path] = []
            for patch in synthetic:
                artifacts += export_patch(patch, directory)
            index = directory / "index.yaml"
            index.write_text(yaml.safe_dump({
                "fold": fold,
                "ratio": ratio,
                "case_ids": [p.case_id for p in synthetic],
                "donor_ids": [p.donor_id for p in synthetic],
            }, sort_keys=False))
            print_progress(f"fold {fold} ratio {ratio:g}: {len(synthetic)} synthetic PNI+ patches")
            return artifacts + [index]

        self.run_stage(f"generate.fold{fold}.{ratio_tag(ratio)}", work)

    def train_classifier(self, fold: int, ratio: float) -> None:
        split = self.fold(fold)
        patches = self.patches()
        c = self.config
        tag = ratio_tag(ratio)

        def work() -> list[Path]:
            vae = self.load_vae(fold)
            train = [patches[i] for i in split.train_ids] + self.synthetic(fold, ratio)
            val = [patches[i] for i in split.val_ids]
            settings = c.classifier_settings(fold)
            params, history = train_classifier(
                train, val, vae, settings, c.ablation(), progress_reporter(f"classifier fold {fold}", c.verbose)
            )
            path = checkpoint.save_checkpoint(self.ckpt_path(fold, f"classifier_{tag}"), params.named_parameters(), {
                "seed": settings.seed,
                "config_hash": self.hash,
                "fold": fold,
                "ratio": ratio,
                "train_ids": [p.case_id for p in train],
                "ablation": asdict(params.ablation),
                "best_epoch": history.best_epoch,
                "best_auc": float(history.best_auc),
                "stopped_epoch": history.stopped_epoch,
            })
            curve = write_csv(
                self.fold_dir(fold) / f"loss_classifier_{tag}.csv",
                ("epoch", "train_loss", "val_auc"),
                (
                    {"epoch": e + 1, "train_loss": l, "val_auc": a}
                    for e, (l, a) in enumerate(zip(history.train_losses, history.val_aucs))
                ),
            )
            print_progress(f"fold {fold} ratio {ratio:g}: best AUC {history.best_auc:.4f} at epoch {history.best_epoch}")
            return [path, checkpoint.manifest_path(path), curve]

        self.run_stage(f"train.classifier.fold{fold}.{tag}", work)

    # ── evaluation ──

    def evaluate(self, what: str) -> Path:
        handlers = {
            "recon": self.evaluate_recon,
            "fid": self.evaluate_fid,
            "classification": self.evaluate_classification,
            "ablation": self.evaluate_ablation,
        }
        if what not in handlers:
            raise ConfigError(f"unknown evaluation '{what}' (choose from {', '.join(handlers)})")
        report = self.root / "reports" / f"{what}.csv"
        handlers[what](report)
        return report

    def _report_stage(self, key: str, report: Path, columns: Sequence[str], rows_fn) -> None:
        def work() -> list[Path]:
            extras: list[Path] = []
            rows = rows_fn(extras)
            print_metric_table(rows, columns)
            return [write_csv(report, columns, rows)] + extras

        self.run_stage(key, work)

    def evaluate_recon(self, report: Path) -> None:
        columns = ("fold", "case_id", "psnr_t1", "ssim_t1", "psnr_t2", "ssim_t2", "tumor_dice")

        def rows(extras: list[Path]) -> list[dict]:
            patches = self.patches()
            out = []
            for split in self.folds():
                vae = self.load_vae(split.fold)
                for case_id in split.val_ids:
                    patch = patches[case_id]
                    recon = vae_reconstruct(patch.image, vae)
                    tumor = patch.labels[1] > 0
                    level = 0.5 * float(patch.image[1][tumor].mean()) if tumor.any() else 0.5
                    out.append({
                        "fold": split.fold,
                        "case_id": case_id,
                        "psnr_t1": psnr(recon[0], patch.image[0]),
                        "ssim_t1": ssim(recon[0], patch.image[0]),
                        "psnr_t2": psnr(recon[1], patch.image[1]),
                        "ssim_t2": ssim(recon[1], patch.image[1]),
                        "tumor_dice": dice(recon[1] > level, tumor),
                    })
            return out

        self._report_stage("evaluate.recon", report, columns, rows)

    def evaluate_fid(self, report: Path) -> None:
        """Real training patches against a real subset and against synthetic ones, per view."""
        columns = ("fold", "comparison", "axial", "sagittal", "coronal", "average")
        ratio = max(self.config.ratios)

        def rows(extras: list[Path]) -> list[dict]:
            patches = self.patches()
            out = []
            for split in self.folds():
                real = [patches[i].image[0] for i in split.train_ids]
                synthetic = [p.image[0] for p in self.synthetic(split.fold, ratio)]
                subset = real[::2]
                for name, other in (("real_subset", subset), ("synthetic", synthetic)):
                    out.append({"fold": split.fold, "comparison": name, **fid_by_view(real, other)})
            return out

        self._report_stage("evaluate.fid", report, columns, rows)

    def evaluate_classification(self, report: Path) -> None:
        columns = ("fold", "ratio", "auc", "n_val")
        ratio = self.config.classifier_ratio

        def rows(extras: list[Path]) -> list[dict]:
            patches = self.patches()
            out = []
            for split in self.folds():
                params = self.load_classifier(split.fold, ratio)
                val = [patches[i] for i in split.val_ids]
                scores = predict(val, params)
                labels = [p.pni for p in val]
                curve = roc_curve(scores, labels)
                extras.append(write_csv(
                    self.root / "reports" / f"roc_fold{split.fold}_{ratio_tag(ratio)}.csv",
                    ("fpr", "tpr", "threshold"),
                    ({"fpr": f, "tpr": t, "threshold": h} for f, t, h in zip(curve.fpr, curve.tpr, curve.thresholds)),
                ))
                out.append({"fold": split.fold, "ratio": ratio, "auc": roc_auc(scores, labels), "n_val": len(val)})
            return out

        self._report_stage("evaluate.classification", report, columns, rows)

    def evaluate_ablation(self, report: Path) -> None:
        """Short classifier runs for every attention variant, per fold."""
        columns = ("fold", "variant", "dab_count", "channel_only", "spatial_only", "best_auc")
        c = self.config
        ratio = c.classifier_ratio

        def rows(extras: list[Path]) -> list[dict]:
            patches = self.patches()
            out = []
            for split in self.folds():
                vae = self.load_vae(split.fold)
                train = [patches[i] for i in split.train_ids] + self.synthetic(split.fold, ratio)
                val = [patches[i] for i in split.val_ids]
                for variant in ABLATION_VARIANTS:
                    variant = AblationConfig(
                        variant.dab_count, variant.channel_only, variant.spatial_only, c.reduction_ratio
                    )
                    _, history = train_classifier(
                        train, val, vae, c.classifier_settings(split.fold, c.ablation_epochs), variant
                    )
                    out.append({
                        "fold": split.fold,
                        "variant": variant.label,
                        "dab_count": variant.dab_count,
                        "channel_only": variant.channel_only,
                        "spatial_only": variant.spatial_only,
                        "best_auc": history.best_auc,
                    })
            return out

        self._report_stage("evaluate.ablation", report, columns, rows)

    # ── full experiment ──

    def crossval(self) -> Path:
        """Every fold through every stage, then the fold × ratio AUC grid."""
        self.phantom()
        self.tlcr()
        splits = self.folds()
        ladder = self.balance_ladder()
        for split in splits:
            counts = ", ".join(f"{r:g}->{n}" for r, n in ladder.counts[split.fold].items())
            print_progress(f"fold {split.fold} synthetic PNI+ per ratio: {counts}")
            for stage in ("vae", "ldm", "controlnet"):
                self.train(stage, split.fold)
            for ratio in ladder.ratios:
                self.generate(split.fold, ratio)
                self.train_classifier(split.fold, ratio)

        columns = ["fold"] + [f"ratio_{r:g}" for r in ladder.ratios]
        report = self.root / "reports" / "crossval.csv"
        patches = self.patches()

        def work() -> list[Path]:
            rows = []
            artifacts = []
            for split in splits:
                row: dict = {"fold": split.fold}
                val = [patches[i] for i in split.val_ids]
                labels = [p.pni for p in val]
                for ratio in ladder.ratios:
                    scores = predict(val, self.load_classifier(split.fold, ratio))
                    row[f"ratio_{ratio:g}"] = roc_auc(scores, labels)
                    curve = roc_curve(scores, labels)
                    artifacts.append(write_csv(
                        self.root / "reports" / "crossval_roc" / f"fold{split.fold}_{ratio_tag(ratio)}.csv",
                        ("fpr", "tpr", "threshold"),
                        ({"fpr": f, "tpr": t, "threshold": h} for f, t, h in zip(curve.fpr, curve.tpr, curve.thresholds)),
                    ))
                rows.append(row)
            mean = {"fold": "mean"}
            for ratio in ladder.ratios:
                key = f"ratio_{ratio:g}"
                mean[key] = float(np.mean([r[key] for r in rows]))
            rows.append(mean)
            print_metric_table(rows, columns)
            return [write_csv(report, columns, rows)] + artifacts

        self.run_stage("crossval", work)
        return report
