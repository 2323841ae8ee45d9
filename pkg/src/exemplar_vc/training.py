"""Loss definitions, optimization loops, fine-tuning, and the AV training
regimes (joint / frozen-audio / video-only) used by the ablation harness.

All loops are single-threaded over parameters and fully seeded: a fixed seed
and fixed data order reproduce the loss sequence exactly on one device.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import AlignedAVExample
from .model import (
    AudioDecoderConfig,
    ClassifierConfig,
    DiscriminatorConfig,
    EncoderConfig,
    ExemplarModel,
    SpeakerClassifier,
    VideoDecoder,
    VideoDecoderConfig,
    VideoDiscriminator,
    save_checkpoint,
)
from .signal import MelSpectrogram, SignalConfig

AUDIO_MODES = ("audio_scratch", "audio_finetune")
AV_MODES = ("av_joint", "av_frozen_audio", "av_video_only")


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    """Raised when a loss goes non-finite; carries the offending step/batch."""

    def __init__(self, step: int, batch_ids, value: float):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(
            f"non-finite loss {value} at step {step} (batch items {self.batch_ids})"
        )


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 8
    max_steps: int = 10000  # paper-scale convergence point for scratch training
    seed: int = 0
    mode: str = "audio_scratch"
    adversarial_weight: float = 0.01
    grad_clip: float = 1.0
    plateau_patience: int | None = None
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.mode not in AUDIO_MODES + AV_MODES:
            raise TrainingError(f"unknown mode '{self.mode}'")


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)  # one dict per executed step
    wall_time_s: float = 0.0
    checkpoint_path: str | None = None

    @property
    def final(self) -> dict:
        return self.steps[-1] if self.steps else {}

    def loss_series(self, key: str = "mel_l1") -> list:
        return [s[key] for s in self.steps if key in s]

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.jsonl", "w", encoding="utf-8") as fh:
            for row in self.steps:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        summary = {
            "steps": len(self.steps),
            "final": self.final,
            "wall_time_s": round(self.wall_time_s, 3),
            "checkpoint_path": self.checkpoint_path,
        }
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def audio_loss(m, m_hat):
    """Mean absolute difference between two mel matrices."""
    if isinstance(m, MelSpectrogram):
        m = m.values
    if isinstance(m_hat, MelSpectrogram):
        m_hat = m_hat.values
    if isinstance(m, torch.Tensor):
        if m.shape != m_hat.shape:
            raise TrainingError(f"shape mismatch {tuple(m.shape)} vs {tuple(m_hat.shape)}")
        return (m - m_hat).abs().mean()
    m = np.asarray(m, dtype=np.float64)
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if m.shape != m_hat.shape:
        raise TrainingError(f"shape mismatch {m.shape} vs {m_hat.shape}")
    return float(np.mean(np.abs(m - m_hat)))


def av_loss(m, v, m_hat, v_hat, disc: nn.Module | None, adversarial_weight: float):
    """Joint audio+video loss. Returns (total, components).

    total = mel L1 + video L1 + weight * generator adversarial term. With a
    zero weight (or no discriminator) this reduces exactly to the two L1
    terms.
    """
    mel_l1 = audio_loss(m, m_hat)
    if isinstance(v, torch.Tensor):
        video_l1 = (v - v_hat).abs().mean()
    else:
        video_l1 = float(np.mean(np.abs(np.asarray(v) - np.asarray(v_hat))))
    if disc is not None and adversarial_weight != 0.0:
        scores = disc(v_hat if isinstance(v_hat, torch.Tensor) else torch.as_tensor(v_hat))
        adv_g = nn.functional.binary_cross_entropy_with_logits(
            scores, torch.ones_like(scores)
        )
    else:
        adv_g = mel_l1 * 0.0 if isinstance(mel_l1, torch.Tensor) else 0.0
    total = mel_l1 + video_l1 + adversarial_weight * adv_g
    components = {"mel_l1": mel_l1, "video_l1": video_l1, "adv_g": adv_g}
    return total, components


def _seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _mel_batch(mels, idx) -> torch.Tensor:
    arrs = [mels[i].values if isinstance(mels[i], MelSpectrogram) else mels[i] for i in idx]
    return torch.from_numpy(np.stack(arrs).astype(np.float32))


def _check_finite(value: float, step: int, idx) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(step, idx, value)


def _plateaued(series, patience: int, tol: float) -> bool:
    if patience is None or len(series) < 2 * patience:
        return False
    recent = float(np.mean(series[-patience:]))
    earlier = float(np.mean(series[-2 * patience : -patience]))
    return recent > earlier * (1.0 - tol)


def _forward_audio(model: ExemplarModel, batch: torch.Tensor) -> torch.Tensor:
    code = model.encoder(batch)
    up = torch.repeat_interleave(code, model.encoder_cfg.downsample, dim=2)
    return model.audio_decoder(up)


def train_exemplar(
    dataset,
    cfg: TrainConfig,
    model: ExemplarModel | None = None,
    encoder_cfg: EncoderConfig | None = None,
    audio_cfg: AudioDecoderConfig | None = None,
    signal_cfg: SignalConfig | None = None,
    out_dir=None,
) -> tuple[ExemplarModel, TrainReport]:
    """Train (or continue training) an audio autoencoder on one target's clips."""
    mels = [ex.mel if isinstance(ex, AlignedAVExample) else ex for ex in dataset]
    if not mels:
        raise TrainingError("empty training set")
    rng = _seed_everything(cfg.seed)
    if model is None:
        model = ExemplarModel(
            encoder_cfg=encoder_cfg or EncoderConfig(),
            audio_cfg=audio_cfg,
            signal_cfg=signal_cfg or SignalConfig(),
        )
    model.train()
    opt = torch.optim.Adam(model.audio_parameters(), lr=cfg.learning_rate)

    report = TrainReport()
    start = time.perf_counter()
    n = len(mels)
    for step in range(cfg.max_steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        batch = _mel_batch(mels, idx)
        opt.zero_grad()
        out = _forward_audio(model, batch)
        loss = audio_loss(batch, out)
        value = float(loss.detach())
        _check_finite(value, step, idx)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.audio_parameters(), cfg.grad_clip)
        opt.step()
        model.step += 1
        report.steps.append({"step": model.step, "mel_l1": value})
        if _plateaued(report.loss_series(), cfg.plateau_patience, cfg.plateau_tol):
            break
    report.wall_time_s = time.perf_counter() - start

    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = out_dir / "checkpoint"
        save_checkpoint(model, ckpt)
        report.checkpoint_path = str(ckpt)
        report.write(out_dir)
    return model, report


def finetune(
    base: ExemplarModel,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
) -> tuple[ExemplarModel, TrainReport]:
    """Adapt a trained model to a new target; every weight stays trainable."""
    base.provenance = base.provenance + [f"finetuned@step{base.step}"]
    if cfg.max_steps == 0:
        report = TrainReport()
        if out_dir is not None:
            out_dir = Path(out_dir)
            ckpt = out_dir / "checkpoint"
            save_checkpoint(base, ckpt)
            report.checkpoint_path = str(ckpt)
            report.write(out_dir)
        return base, report
    return train_exemplar(dataset, cfg, model=base, out_dir=out_dir)


def train_av(
    dataset,
    cfg: TrainConfig,
    base: ExemplarModel | None = None,
    encoder_cfg: EncoderConfig | None = None,
    audio_cfg: AudioDecoderConfig | None = None,
    video_cfg: VideoDecoderConfig | None = None,
    disc_cfg: DiscriminatorConfig | None = None,
    signal_cfg: SignalConfig | None = None,
    out_dir=None,
) -> tuple[ExemplarModel, TrainReport]:
    """Train the video decoder (and discriminator) on aligned AV examples.

    Modes: av_joint finetunes the audio path alongside the video decoder
    (from `base` when given); av_frozen_audio trains only the video path on a
    frozen base; av_video_only trains encoder+video from scratch with no
    audio reconstruction term.
    """
    if cfg.mode not in AV_MODES:
        raise TrainingError(f"train_av requires an av_* mode, got '{cfg.mode}'")
    examples = [ex for ex in dataset if isinstance(ex, AlignedAVExample)]
    if not examples:
        raise TrainingError("train_av needs AlignedAVExample items")
    if cfg.mode == "av_frozen_audio" and base is None:
        raise TrainingError("av_frozen_audio requires a pretrained base")

    rng = _seed_everything(cfg.seed)
    frame_size = examples[0].frames.shape[1]
    video_cfg = video_cfg or VideoDecoderConfig(stage1_size=frame_size // 2)
    disc_cfg = disc_cfg or DiscriminatorConfig()
    if video_cfg.stage2_size != frame_size:
        raise TrainingError(
            f"video decoder emits {video_cfg.stage2_size}px frames but dataset has {frame_size}px"
        )

    if base is not None:
        model = base
        if model.video_decoder is None:
            model.video_cfg = VideoDecoderConfig(
                code_dim=model.encoder_cfg.code_dim,
                temporal_kernel=video_cfg.temporal_kernel,
                temporal_stride=video_cfg.temporal_stride,
                base_channels=video_cfg.base_channels,
                stage1_size=video_cfg.stage1_size,
            )
            model.disc_cfg = disc_cfg
            model.video_decoder = VideoDecoder(model.video_cfg)
            model.video_disc = VideoDiscriminator(disc_cfg)
    else:
        enc = encoder_cfg or EncoderConfig()
        model = ExemplarModel(
            encoder_cfg=enc,
            audio_cfg=audio_cfg,
            video_cfg=VideoDecoderConfig(
                code_dim=enc.code_dim,
                temporal_kernel=video_cfg.temporal_kernel,
                temporal_stride=video_cfg.temporal_stride,
                base_channels=video_cfg.base_channels,
                stage1_size=video_cfg.stage1_size,
            ),
            disc_cfg=disc_cfg,
            signal_cfg=signal_cfg or SignalConfig(),
        )
    model.train()

    train_audio_terms = cfg.mode in ("av_joint",)
    if cfg.mode == "av_joint":
        gen_params = model.audio_parameters() + list(model.video_decoder.parameters())
    elif cfg.mode == "av_frozen_audio":
        gen_params = list(model.video_decoder.parameters())
        for p in model.audio_parameters():
            p.requires_grad_(False)
        model.encoder.eval()
        model.audio_decoder.eval()
    else:  # av_video_only: encoder + video path, no audio reconstruction
        gen_params = list(model.encoder.parameters()) + list(model.video_decoder.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(model.video_disc.parameters(), lr=cfg.learning_rate)
    bce = nn.functional.binary_cross_entropy_with_logits

    report = TrainReport()
    start = time.perf_counter()
    n = len(examples)
    ds = model.encoder_cfg.downsample
    for step in range(cfg.max_steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        mel = _mel_batch([examples[i].mel for i in range(n)], idx)
        frames = torch.from_numpy(
            np.stack([examples[i].frames for i in idx]).astype(np.float32)
        ).permute(0, 4, 1, 2, 3)  # (B, 3, Tv, H, W)

        # Discriminator update on real vs detached fakes (1:1 with generator).
        code = model.encoder(mel)
        up = torch.repeat_interleave(code, ds, dim=2)
        _, fake = model.video_decoder(up)
        opt_d.zero_grad()
        real_scores = model.video_disc(frames)
        fake_scores = model.video_disc(fake.detach())
        loss_d = bce(real_scores, torch.ones_like(real_scores)) + bce(
            fake_scores, torch.zeros_like(fake_scores)
        )
        value_d = float(loss_d.detach())
        _check_finite(value_d, step, idx)
        loss_d.backward()
        torch.nn.utils.clip_grad_norm_(model.video_disc.parameters(), cfg.grad_clip)
        opt_d.step()

        # Generator update.
        opt_g.zero_grad()
        code = model.encoder(mel)
        up = torch.repeat_interleave(code, ds, dim=2)
        _, fake = model.video_decoder(up)
        video_l1 = (frames - fake).abs().mean()
        scores = model.video_disc(fake)
        adv_g = bce(scores, torch.ones_like(scores))
        mel_l1 = None
        if train_audio_terms:
            mel_hat = model.audio_decoder(up)
            mel_l1 = audio_loss(mel, mel_hat)
        elif cfg.mode == "av_frozen_audio":
            with torch.no_grad():
                mel_l1 = audio_loss(mel, model.audio_decoder(up))
        loss_g = video_l1 + cfg.adversarial_weight * adv_g
        if train_audio_terms:
            loss_g = loss_g + mel_l1
        value_g = float(loss_g.detach())
        _check_finite(value_g, step, idx)
        loss_g.backward()
        torch.nn.utils.clip_grad_norm_(gen_params, cfg.grad_clip)
        opt_g.step()

        model.step += 1
        row = {
            "step": model.step,
            "video_l1": float(video_l1.detach()),
            "adv_g": float(adv_g.detach()),
            "adv_d": value_d,
        }
        if mel_l1 is not None:
            row["mel_l1"] = float(mel_l1.detach() if isinstance(mel_l1, torch.Tensor) else mel_l1)
        report.steps.append(row)
        if _plateaued(report.loss_series("video_l1"), cfg.plateau_patience, cfg.plateau_tol):
            break
    report.wall_time_s = time.perf_counter() - start

    for p in model.audio_parameters():
        p.requires_grad_(True)
    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = out_dir / "checkpoint"
        save_checkpoint(model, ckpt)
        report.checkpoint_path = str(ckpt)
        report.write(out_dir)
    return model, report


def train_classifier(
    mels,
    labels,
    n_classes: int,
    cfg: TrainConfig,
    clf_cfg: ClassifierConfig | None = None,
) -> tuple[SpeakerClassifier, TrainReport]:
    """Train a mel classifier (speaker id or real/fake) with cross entropy."""
    if len(mels) != len(labels):
        raise TrainingError("mels and labels must align")
    if len(set(labels)) < 2:
        raise TrainingError("need at least two classes present in training data")
    rng = _seed_everything(cfg.seed)
    clf = SpeakerClassifier(
        clf_cfg or ClassifierConfig(n_mels=mels[0].values.shape[0], n_speakers=n_classes)
    )
    clf.train()
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.learning_rate)
    target = torch.tensor(list(labels), dtype=torch.long)

    report = TrainReport()
    start = time.perf_counter()
    n = len(mels)
    for step in range(cfg.max_steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=n < cfg.batch_size)
        batch = _mel_batch(mels, idx)
        opt.zero_grad()
        logits = clf(batch)
        loss = nn.functional.cross_entropy(logits, target[idx])
        value = float(loss.detach())
        _check_finite(value, step, idx)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(clf.parameters(), cfg.grad_clip)
        opt.step()
        report.steps.append({"step": step + 1, "xent": value})
    report.wall_time_s = time.perf_counter() - start
    clf.eval()
    return clf, report
