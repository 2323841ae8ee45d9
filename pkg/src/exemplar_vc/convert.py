"""Inference: project input speech through a target exemplar model.

The whole (padded) utterance goes through the recurrent nets in one pass
rather than independent windows, which avoids clicks at clip boundaries.
Conversion is deterministic: same input + same checkpoint give bit-identical
mel output.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import signal as sig
from .dataset import FRAMES_PER_CLIP
from .model import ContentCode, ExemplarModel, ModelError, load_checkpoint, pad_to_multiple, upsample_code
from .signal import AudioClip, EmptyInputError, MelSpectrogram, SignalConfig


class ConversionError(Exception):
    pass


class ConfigHashMismatch(ConversionError):
    """Checkpoint was trained under a different signal configuration."""


@dataclass
class ConversionResult:
    audio: AudioClip
    mel_out: MelSpectrogram
    content: ContentCode
    frames: np.ndarray | None = None
    timing_ms: dict | None = None

    def write(self, out_dir, checkpoint_id: str = "") -> None:
        """Emit converted.wav, optional frames/, and result.json under out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sig.save_audio(self.audio, out_dir / "converted.wav")
        if self.frames is not None:
            from .dataset import _write_frames

            _write_frames(self.frames, out_dir / "frames")
        info = {
            "checkpoint_id": checkpoint_id,
            "audio_samples": len(self.audio),
            "mel_shape": list(self.mel_out.values.shape),
            "code_shape": list(self.content.values.shape),
            "frames": list(self.frames.shape) if self.frames is not None else None,
            "timing_ms": self.timing_ms,
        }
        with open(out_dir / "result.json", "w", encoding="utf-8") as fh:
            json.dump(info, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _resolve_model(ckpt) -> ExemplarModel:
    if isinstance(ckpt, ExemplarModel):
        return ckpt
    return load_checkpoint(ckpt)


def _check_hash(model: ExemplarModel, cfg: SignalConfig) -> None:
    ours = cfg.content_hash()
    theirs = model.signal_cfg.content_hash()
    if ours != theirs:
        raise ConfigHashMismatch(
            f"signal config mismatch: checkpoint hash {theirs}, current {ours}"
        )


def convert_mel(model: ExemplarModel, mel: MelSpectrogram) -> tuple[MelSpectrogram, ContentCode]:
    """Mel-to-mel projection: encode, upsample, decode, truncate."""
    t_orig = mel.n_frames
    code = model.encode(mel)
    up = upsample_code(code, model.encoder_cfg.downsample)
    out = model.decode_audio(up)[:, :t_orig]
    return MelSpectrogram(out, hop_seconds=mel.hop_seconds), code


def convert_audio(
    input_clip: AudioClip,
    ckpt,
    cfg: SignalConfig | None = None,
) -> ConversionResult:
    """Convert speech into the checkpoint's target style (audio only)."""
    model = _resolve_model(ckpt)
    cfg = cfg or model.signal_cfg
    _check_hash(model, cfg)
    if len(input_clip) == 0:
        raise EmptyInputError("cannot convert an empty clip")

    timing: dict = {}
    t0 = time.perf_counter()
    mel_in = sig.mel_spectrogram(input_clip, cfg)
    timing["analysis"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    mel_out, code = convert_mel(model, mel_in)
    timing["model"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    audio = sig.griffin_lim(mel_out, cfg)
    peak = float(np.max(np.abs(audio.samples)))
    if peak > 0:
        audio = AudioClip(audio.samples * (sig.PEAK_NORM / peak), audio.sample_rate)
    timing["vocoder"] = (time.perf_counter() - t0) * 1000.0

    return ConversionResult(audio=audio, mel_out=mel_out, content=code, timing_ms=timing)


def convert_av(
    input_clip: AudioClip,
    ckpt,
    cfg: SignalConfig | None = None,
) -> ConversionResult:
    """Convert speech to audio plus frames; requires a video-bearing checkpoint."""
    model = _resolve_model(ckpt)
    if not model.has_video:
        raise ModelError("checkpoint has no video decoder; use convert_audio")
    result = convert_audio(input_clip, model, cfg)
    cfg = cfg or model.signal_cfg

    t0 = time.perf_counter()
    # Video runs on whole 1.6 s clips: pad the mel out to a clip boundary.
    padded = pad_to_multiple(
        pad_to_multiple(sig.mel_spectrogram(input_clip, cfg).values, cfg.clip_frames),
        model.encoder_cfg.downsample,
    )
    code = model.encode(MelSpectrogram(padded))
    up = upsample_code(code, model.encoder_cfg.downsample)
    frames = model.decode_video(up)
    n_clips = padded.shape[1] // cfg.clip_frames
    expected = FRAMES_PER_CLIP * n_clips
    frames = frames[:expected]
    result.timing_ms["video"] = (time.perf_counter() - t0) * 1000.0
    result.frames = frames
    return result
