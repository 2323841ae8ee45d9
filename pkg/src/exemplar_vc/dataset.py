"""Corpus handling: manifests, train/eval assembly, AV frame alignment, and a
deterministic synthetic-speaker generator used as ground truth in tests.

The synthetic corpus is a 3-formant source-filter synthesizer: an impulse
train at the speaker's pitch drives per-word resonant-filter trajectories,
scaled by a per-speaker formant ratio. The same word spoken by two synthetic
speakers lands close in mel space while different words stay apart, which is
what the conversion and clustering harnesses rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.signal

from . import signal as sig
from .signal import AudioClip, MelSpectrogram, SignalConfig

VIDEO_FPS = 20
FRAMES_PER_CLIP = 32  # 1.6 s at 20 fps


class DatasetError(Exception):
    """Base for corpus/manifest failures."""


class ManifestError(DatasetError):
    pass


class ValidationError(DatasetError):
    pass


class AlignmentError(DatasetError):
    """Audio clip has no matching run of video frames."""


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speaker: str
    audio_path: str
    split: str = "train"
    video_dir: str | None = None
    word_label: str | None = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValidationError(f"record {self.id}: split must be train or test")


@dataclass(frozen=True)
class AlignedAVExample:
    mel: MelSpectrogram
    frames: np.ndarray  # (32, H, W, 3) in [0, 1]

    def __post_init__(self):
        if self.frames.shape[0] != FRAMES_PER_CLIP:
            raise ValidationError(
                f"AV example needs {FRAMES_PER_CLIP} frames, got {self.frames.shape[0]}"
            )


@dataclass(frozen=True)
class SynthSpeakerSpec:
    speaker_id: str
    pitch_hz: float
    formant_shift: float
    vocab: tuple
    seed: int
    noise_level: float = 0.003
    style_tag: str | None = None

    def __post_init__(self):
        if not (80.0 <= self.pitch_hz <= 400.0):
            raise ValidationError("pitch_hz must be in [80, 400]")
        if not (0.7 <= self.formant_shift <= 1.4):
            raise ValidationError("formant_shift must be in [0.7, 1.4]")
        if not self.vocab:
            raise ValidationError("vocab must be non-empty")
        object.__setattr__(self, "vocab", tuple(self.vocab))


# --- manifest I/O ---------------------------------------------------------

_REQUIRED_FIELDS = ("id", "speaker", "audio_path")


def load_manifest(path) -> list[UtteranceRecord]:
    """Read a JSONL manifest; rejects malformed lines and duplicate ids."""
    path = Path(path)
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            for key in _REQUIRED_FIELDS:
                if key not in raw:
                    raise ManifestError(f"{path}:{lineno}: missing field '{key}'")
            rec = UtteranceRecord(
                id=str(raw["id"]),
                speaker=str(raw["speaker"]),
                audio_path=str(raw["audio_path"]),
                split=str(raw.get("split", "train")),
                video_dir=raw.get("video_dir"),
                word_label=raw.get("word_label"),
            )
            if rec.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id '{rec.id}'")
            seen.add(rec.id)
            records.append(rec)
    return records


def save_manifest(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            row = {k: v for k, v in asdict(rec).items() if v is not None}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _resolve(path_str: str, root: Path | None) -> Path:
    p = Path(path_str)
    if not p.is_absolute() and root is not None:
        p = root / p
    return p


def _load_frame_dir(video_dir: Path) -> np.ndarray:
    from PIL import Image

    files = sorted(video_dir.glob("*.png"))
    if not files:
        raise AlignmentError(f"no PNG frames under {video_dir}")
    frames = []
    for f in files:
        with Image.open(f) as im:
            frames.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    return np.stack(frames)


def build_training_set(
    records,
    cfg: SignalConfig,
    allow_multi_speaker: bool = False,
    root=None,
):
    """Segment every record into fixed-length mels (paired with frames when video
    is present). Enforces single-speaker (exemplar) discipline unless the
    multi-speaker ablation flag is set."""
    records = list(records)
    if not records:
        raise ValidationError("no records to build a training set from")
    speakers = {r.speaker for r in records}
    if len(speakers) > 1 and not allow_multi_speaker:
        raise ValidationError(
            "records span multiple speakers "
            f"({', '.join(sorted(speakers))}); exemplar training requires one "
            "speaker (pass allow_multi_speaker for the ablation)"
        )
    root = Path(root) if root is not None else None
    out = []
    for rec in records:
        clip = sig.load_audio(_resolve(rec.audio_path, root), cfg.sample_rate)
        pieces = sig.segment_clips(clip, cfg)
        mels = [sig.mel_spectrogram(c, cfg) for c in pieces]
        if rec.video_dir is None:
            out.extend(mels)
            continue
        frames = _load_frame_dir(_resolve(rec.video_dir, root))
        for i, mel in enumerate(mels):
            chunk = frames[i * FRAMES_PER_CLIP : (i + 1) * FRAMES_PER_CLIP]
            if chunk.shape[0] < FRAMES_PER_CLIP:
                raise AlignmentError(
                    f"record {rec.id}: clip {i} needs {FRAMES_PER_CLIP} frames, "
                    f"found {chunk.shape[0]}"
                )
            out.append(AlignedAVExample(mel, chunk))
    return out


# --- synthetic speakers ---------------------------------------------------

# Formant ranges (Hz) the per-word trajectory templates are spread across.
_F1_RANGE = (320.0, 780.0)
_F2_RANGE = (1000.0, 2150.0)
_F3_RANGE = (2450.0, 3050.0)
_FORMANT_BANDWIDTHS = (90.0, 110.0, 160.0)
_DURATION_RANGE = (0.75, 1.35)  # word-body seconds, a strong shared word cue


@dataclass(frozen=True)
class WordTemplate:
    """Speaker-independent recipe for one vocabulary word: three-point
    formant glides, a body duration, and a syllable count."""

    f1: tuple[float, float, float]
    f2: tuple[float, float, float]
    f3: tuple[float, float, float]
    duration: float
    syllables: int


def _golden(i: int, offset: float) -> float:
    return (offset + i * 0.6180339887498949) % 1.0


def word_templates(vocab) -> dict[str, WordTemplate]:
    """Assign well-separated word recipes to a vocabulary.

    Sorted-vocab order is laid out with low-discrepancy sequences over the
    formant, duration, and syllable axes, so any two words differ in several
    cues at once and cluster apart in mel space regardless of speaker.
    """
    vocab = sorted(set(vocab))
    n = len(vocab)
    templates = {}
    for i, word in enumerate(vocab):
        u = (i + 0.5) / n
        a = _golden(i, 0.5)
        b = _golden(i, 0.25)
        c = _golden(i, 0.75)

        def track(lo, hi, x, y, z):
            return (lo + x * (hi - lo), lo + y * (hi - lo), lo + z * (hi - lo))

        templates[word] = WordTemplate(
            f1=track(*_F1_RANGE, u, a, b),
            f2=track(*_F2_RANGE, a, (1.0 - u), c),
            f3=track(*_F3_RANGE, b, c, (a + 0.5) % 1.0),
            duration=_DURATION_RANGE[0] + u * (_DURATION_RANGE[1] - _DURATION_RANGE[0]),
            syllables=1 + (i % 3),
        )
    return templates


def _resonator_coeffs(freq: float, bandwidth: float, sample_rate: int):
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * freq / sample_rate
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    # Unit gain at the resonance peak.
    gain = (1.0 - r) * abs(1.0 - r * np.exp(-2j * theta))
    b = np.array([gain])
    return b, a


def _glide(points, frac: float) -> float:
    """Piecewise-linear value through (start, mid, end) at frac in [0, 1]."""
    p0, p1, p2 = points
    if frac < 0.5:
        return p0 + (p1 - p0) * (frac / 0.5)
    return p1 + (p2 - p1) * ((frac - 0.5) / 0.5)


def _syllable_envelope(n: int, syllables: int, sample_rate: int) -> np.ndarray:
    """Raised-cosine amplitude bursts, one per syllable, with short gaps."""
    t = np.linspace(0.0, 1.0, n)
    env = np.zeros(n)
    width = 1.0 / syllables
    for s in range(syllables):
        center = (s + 0.5) * width
        local = (t - center) / (0.46 * width)
        mask = np.abs(local) <= 1.0
        env[mask] = np.maximum(env[mask], 0.5 * (1.0 + np.cos(np.pi * local[mask])))
    fade = min(int(0.02 * sample_rate), n // 4)
    env[:fade] *= np.linspace(0.0, 1.0, fade)
    env[-fade:] *= np.linspace(1.0, 0.0, fade)
    return env


def synth_word_waveform(
    template: WordTemplate,
    spec: SynthSpeakerSpec,
    rng: np.random.Generator,
    sample_rate: int = 16000,
    token_samples: int = 25600,
) -> np.ndarray:
    """Render one word token for one synthetic speaker.

    An impulse-train source at the speaker's pitch (with vibrato and a mild
    downward intonation) is filtered by three time-varying resonators whose
    center frequencies glide along the word template scaled by the speaker's
    formant ratio; syllable bursts shape the amplitude. The word body is
    placed at the start of a fixed-length silent buffer so token duration
    survives as a content cue. Per-utterance jitter is drawn from rng.
    """
    duration = template.duration * (1.0 + rng.uniform(-0.06, 0.06))
    n = min(int(round(duration * sample_rate)), token_samples)
    t = np.arange(n) / sample_rate

    pitch = spec.pitch_hz * (1.0 + rng.uniform(-0.03, 0.03))
    contour = pitch * (
        1.0
        + 0.04 * np.cos(np.pi * t / duration)
        + 0.02 * np.sin(2.0 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi))
    )
    phase = np.cumsum(2.0 * np.pi * contour / sample_rate)
    pulses = np.zeros(n)
    pulse_idx = np.nonzero(np.diff(np.floor(phase / (2.0 * np.pi))) > 0)[0]
    pulses[pulse_idx] = 1.0
    # Soften the glottal pulses with a one-pole lowpass, add aspiration noise.
    source = scipy.signal.lfilter([1.0], [1.0, -0.92], pulses)
    source += spec.noise_level * rng.standard_normal(n)

    block = max(1, sample_rate // 100)  # 10 ms piecewise-constant formants
    shift = spec.formant_shift * (1.0 + rng.uniform(-0.02, 0.02))
    tracks = [template.f1, template.f2, template.f3]
    rendered = np.zeros(n)
    for points, bw in zip(tracks, _FORMANT_BANDWIDTHS):
        zi = np.zeros(2)
        out = np.empty(n)
        for start in range(0, n, block):
            stop = min(start + block, n)
            frac = (start + stop) / 2.0 / n
            freq = min(shift * _glide(points, frac), sample_rate / 2.0 - 200.0)
            b, a = _resonator_coeffs(freq, bw, sample_rate)
            out[start:stop], zi = scipy.signal.lfilter(b, a, source[start:stop], zi=zi)
            zi = np.asarray(zi)
        rendered += out

    rendered *= _syllable_envelope(n, template.syllables, sample_rate)

    peak = np.max(np.abs(rendered))
    if peak > 0:
        rendered = rendered * (0.9 / peak)
    token = np.zeros(token_samples)
    token[: rendered.size] = rendered
    return token


def render_avatar_frames(
    samples: np.ndarray,
    spec: SynthSpeakerSpec,
    sample_rate: int = 16000,
    size: int = 64,
    fps: int = VIDEO_FPS,
) -> np.ndarray:
    """Procedural talking-avatar frames whose mouth opening tracks smoothed
    per-frame audio energy. Face colour/geometry derive from the speaker seed
    so different speakers look different."""
    rng = np.random.default_rng(spec.seed + 7919)
    face_color = 0.45 + 0.4 * rng.random(3)
    bg = 0.12 + 0.1 * rng.random(3)
    face_r = size * (0.33 + 0.05 * rng.random())

    hop = sample_rate // fps
    n_frames = int(np.ceil(samples.size / hop))
    energy = np.zeros(n_frames)
    for i in range(n_frames):
        chunk = samples[i * hop : (i + 1) * hop]
        energy[i] = np.sqrt(np.mean(chunk**2)) if chunk.size else 0.0
    if energy.max() > 0:
        energy = energy / energy.max()
    # Smooth so the mouth trajectory is predictable from coarse content codes.
    kernel = np.array([0.25, 0.5, 0.25])
    energy = np.convolve(energy, kernel, mode="same")

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = cy = size / 2.0
    face_mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= face_r**2
    eye_dx = face_r * 0.45
    eye_y = cy - face_r * 0.35
    eye_r = max(1.5, size * 0.035)
    eyes = ((xx - (cx - eye_dx)) ** 2 + (yy - eye_y) ** 2 <= eye_r**2) | (
        (xx - (cx + eye_dx)) ** 2 + (yy - eye_y) ** 2 <= eye_r**2
    )

    frames = np.empty((n_frames, size, size, 3), dtype=np.float32)
    mouth_w = face_r * 0.55
    mouth_y = cy + face_r * 0.45
    for i in range(n_frames):
        img = np.empty((size, size, 3))
        img[:] = bg
        img[face_mask] = face_color
        img[eyes] = 0.05
        mouth_h = 1.0 + energy[i] * face_r * 0.45
        mouth = ((xx - cx) / mouth_w) ** 2 + ((yy - mouth_y) / mouth_h) ** 2 <= 1.0
        img[mouth] = (0.08, 0.02, 0.02)
        frames[i] = img
    return frames


def generate_synth_corpus(
    specs,
    utterances_per_word: int,
    out_dir,
    cfg: SignalConfig | None = None,
    with_video: bool = False,
    test_fraction: float = 0.25,
) -> list[UtteranceRecord]:
    """Render a synthetic multi-speaker corpus to out_dir.

    Writes wav/ (one file per utterance), optional frames/<id>/ PNG
    directories, and manifest.jsonl. Fully deterministic given the specs'
    seeds. The last ceil(test_fraction * utterances_per_word) takes of each
    (speaker, word) become the test split so test speech is disjoint from
    training speech.
    """
    specs = list(specs)
    if len(specs) < 2:
        raise ValidationError("need at least 2 speaker specs")
    vocabs = {tuple(sorted(s.vocab)) for s in specs}
    if len(vocabs) != 1:
        raise ValidationError("all speaker specs must share one vocabulary")
    cfg = cfg or SignalConfig()
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)

    templates = word_templates(specs[0].vocab)
    n_test = int(np.ceil(test_fraction * utterances_per_word)) if utterances_per_word > 1 else 0

    records = []
    for spec in specs:
        for w_idx, word in enumerate(sorted(spec.vocab)):
            for k in range(utterances_per_word):
                rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, w_idx, k])
                )
                samples = synth_word_waveform(
                    templates[word], spec, rng, cfg.sample_rate, cfg.clip_samples
                )
                uid = f"{spec.speaker_id}_{word}_{k:03d}"
                wav_path = out_dir / "wav" / f"{uid}.wav"
                sig.save_audio(AudioClip(samples, cfg.sample_rate), wav_path)
                video_dir = None
                if with_video:
                    # Render frames from the clip-padded waveform so every
                    # 1.6 s audio clip pairs with exactly 32 frames.
                    pieces = sig.segment_clips(AudioClip(samples, cfg.sample_rate), cfg)
                    padded = np.concatenate([c.samples for c in pieces])
                    frames = render_avatar_frames(padded, spec, cfg.sample_rate)
                    video_dir = f"frames/{uid}"
                    _write_frames(frames, out_dir / video_dir)
                split = "test" if k >= utterances_per_word - n_test else "train"
                records.append(
                    UtteranceRecord(
                        id=uid,
                        speaker=spec.speaker_id,
                        audio_path=f"wav/{uid}.wav",
                        split=split,
                        video_dir=video_dir,
                        word_label=word,
                    )
                )
    save_manifest(records, out_dir / "manifest.jsonl")
    return records


def _write_frames(frames: np.ndarray, frame_dir: Path) -> None:
    from PIL import Image

    frame_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        img = Image.fromarray((np.clip(frame, 0.0, 1.0) * 255).astype(np.uint8))
        img.save(frame_dir / f"{i:05d}.png")


def clip_mels_for_records(records, cfg: SignalConfig, root=None):
    """Per-record segmented mels with labels kept; used by eval harnesses.

    Returns a list of (record, [MelSpectrogram, ...]).
    """
    root = Path(root) if root is not None else None
    out = []
    for rec in records:
        clip = sig.load_audio(_resolve(rec.audio_path, root), cfg.sample_rate)
        mels = [sig.mel_spectrogram(c, cfg) for c in sig.segment_clips(clip, cfg)]
        out.append((rec, mels))
    return out
