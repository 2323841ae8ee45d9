"""Network definitions and checkpoint I/O.

The conversion path is a pure function of audio: no component anywhere takes
a speaker identity input. Content passes through a narrow bidirectional
bottleneck (2 * cell_dim rows at 1/32 of the mel frame rate), which is what
forces out-of-sample inputs onto the training style at inference time.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .signal import MelSpectrogram, SignalConfig

FORMAT_VERSION = 1


class ModelError(Exception):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_mels: int = 80
    conv_layers: int = 3
    kernel: int = 5
    conv_channels: int = 512
    lstm_layers: int = 2
    cell_dim: int = 32
    downsample: int = 32

    @property
    def code_dim(self) -> int:
        return 2 * self.cell_dim


@dataclass(frozen=True)
class AudioDecoderConfig:
    code_dim: int = 64
    pre_lstm: int = 512
    conv_layers: int = 3
    conv_channels: int = 512
    kernel: int = 5
    post_lstm: int = 1024
    post_lstm_layers: int = 2
    out_dim: int = 80


@dataclass(frozen=True)
class VideoDecoderConfig:
    code_dim: int = 64
    temporal_kernel: int = 5
    temporal_stride: int = 4  # 80 fps code rate -> 20 fps frames
    base_channels: int = 32
    stage1_size: int = 64  # stage 2 always doubles this
    fps: int = 20

    @property
    def stage2_size(self) -> int:
        return 2 * self.stage1_size


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 32


@dataclass(frozen=True)
class ClassifierConfig:
    n_mels: int = 80
    channels: int = 128
    n_speakers: int = 2


@dataclass(frozen=True)
class ContentCode:
    """Bottleneck content matrix: 2*cell rows, one column per 32 mel frames.

    Rows [0, cell) hold forward-path features sampled at the last frame of
    each block, rows [cell, 2*cell) backward-path features sampled at the
    first frame.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.shape[1] < 1:
            raise ValueError("content code must be a 2-D matrix with >= 1 column")
        if not np.all(np.isfinite(values)):
            raise ValueError("content code must be finite")
        object.__setattr__(self, "values", values)


class ContentEncoder(nn.Module):
    """Conv stack + BiLSTM with asymmetric forward/backward downsampling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        convs = []
        in_ch = cfg.n_mels
        for _ in range(cfg.conv_layers):
            convs += [
                nn.Conv1d(in_ch, cfg.conv_channels, cfg.kernel, padding=cfg.kernel // 2),
                nn.BatchNorm1d(cfg.conv_channels),
                nn.ReLU(),
            ]
            in_ch = cfg.conv_channels
        self.convs = nn.Sequential(*convs)
        self.lstm = nn.LSTM(
            cfg.conv_channels,
            cfg.cell_dim,
            num_layers=cfg.lstm_layers,
            bidirectional=True,
            batch_first=True,
        )

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (B, n_mels, T) with T divisible by the downsample factor
        ds = self.cfg.downsample
        if mel.shape[-1] % ds != 0:
            raise ModelError(f"encoder input length {mel.shape[-1]} not divisible by {ds}")
        x = self.convs(mel).transpose(1, 2)
        out, _ = self.lstm(x)
        cell = self.cfg.cell_dim
        fwd = out[:, ds - 1 :: ds, :cell]  # end of each block
        bwd = out[:, 0::ds, cell:]  # start of each block
        return torch.cat([fwd, bwd], dim=2).transpose(1, 2)  # (B, 2*cell, T/ds)


class AudioDecoder(nn.Module):
    """LSTM/conv stack mapping upsampled codes back to mel frames in [0, 1]."""

    def __init__(self, cfg: AudioDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.pre_lstm = nn.LSTM(cfg.code_dim, cfg.pre_lstm, batch_first=True)
        convs = []
        in_ch = cfg.pre_lstm
        for _ in range(cfg.conv_layers):
            convs += [
                nn.Conv1d(in_ch, cfg.conv_channels, cfg.kernel, padding=cfg.kernel // 2),
                nn.BatchNorm1d(cfg.conv_channels),
                nn.ReLU(),
            ]
            in_ch = cfg.conv_channels
        self.convs = nn.Sequential(*convs)
        self.post_lstm = nn.LSTM(
            cfg.conv_channels, cfg.post_lstm, num_layers=cfg.post_lstm_layers, batch_first=True
        )
        self.proj = nn.Linear(cfg.post_lstm, cfg.out_dim)

    def forward(self, code_up: torch.Tensor) -> torch.Tensor:
        # code_up: (B, code_dim, T) -> (B, out_dim, T)
        x, _ = self.pre_lstm(code_up.transpose(1, 2))
        x = self.convs(x.transpose(1, 2))
        x, _ = self.post_lstm(x.transpose(1, 2))
        return torch.sigmoid(self.proj(x)).transpose(1, 2)


def _upsample_stages(size: int) -> int:
    if size < 4 or size & (size - 1):
        raise ValueError("stage1_size must be a power of two >= 4")
    return int(np.log2(size // 4))


class VideoDecoder(nn.Module):
    """Two-stage frame synthesizer driven by the upsampled content code.

    A strided 1-D conv aligns the 80 fps code rate to 20 fps, then 3-D
    transposed convolutions grow a coarse stage-1 clip which stage 2
    refines at double resolution.
    """

    def __init__(self, cfg: VideoDecoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.temporal = nn.Conv1d(
            cfg.code_dim,
            4 * c,
            cfg.temporal_kernel,
            stride=cfg.temporal_stride,
            padding=cfg.temporal_kernel // 2,
        )
        ups = _upsample_stages(cfg.stage1_size)
        layers = [
            nn.ConvTranspose3d(4 * c, 4 * c, (3, 4, 4), (1, 4, 4), (1, 0, 0)),
            nn.BatchNorm3d(4 * c),
            nn.ReLU(),
        ]
        ch = 4 * c
        for i in range(ups):
            out_ch = max(c, ch // 2)
            layers += [
                nn.ConvTranspose3d(ch, out_ch, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
                nn.BatchNorm3d(out_ch),
                nn.ReLU(),
            ]
            ch = out_ch
        self.stage1 = nn.Sequential(*layers)
        self.stage1_rgb = nn.Conv3d(ch, 3, (3, 3, 3), padding=(1, 1, 1))
        self.stage2 = nn.Sequential(
            nn.Conv3d(3, c, (3, 3, 3), padding=(1, 1, 1)),
            nn.BatchNorm3d(c),
            nn.ReLU(),
            nn.ConvTranspose3d(c, c, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
            nn.BatchNorm3d(c),
            nn.ReLU(),
        )
        self.stage2_rgb = nn.Conv3d(c, 3, (3, 3, 3), padding=(1, 1, 1))

    def forward(self, code_up: torch.Tensor):
        # code_up: (B, code_dim, T) -> coarse (B,3,Tv,s,s), fine (B,3,Tv,2s,2s)
        latent = self.temporal(code_up)  # (B, 4c, Tv)
        x = latent[:, :, :, None, None]
        feats = self.stage1(x)
        coarse = torch.sigmoid(self.stage1_rgb(feats))
        fine = torch.sigmoid(self.stage2_rgb(self.stage2(coarse)))
        return coarse, fine


class VideoDiscriminator(nn.Module):
    """3D-conv patch discriminator returning one logit per temporal patch."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv3d(3, c, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
            nn.LeakyReLU(0.2),
            nn.Conv3d(c, 2 * c, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
            nn.BatchNorm3d(2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv3d(2 * c, 4 * c, (3, 4, 4), (1, 2, 2), (1, 1, 1)),
            nn.BatchNorm3d(4 * c),
            nn.LeakyReLU(0.2),
            nn.Conv3d(4 * c, 1, (3, 3, 3), padding=(1, 1, 1)),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (B, 3, T, H, W) -> patch logits (B, 1, t, h, w)
        return self.net(frames)


class SpeakerClassifier(nn.Module):
    """Mel-level speaker classifier: strided conv stack + mean pool + linear."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.net = nn.Sequential(
            nn.Conv1d(cfg.n_mels, c, 5, padding=2),
            nn.BatchNorm1d(c),
            nn.ReLU(),
            nn.Conv1d(c, c, 5, stride=2, padding=2),
            nn.BatchNorm1d(c),
            nn.ReLU(),
            nn.Conv1d(c, c, 5, stride=2, padding=2),
            nn.BatchNorm1d(c),
            nn.ReLU(),
        )
        self.head = nn.Linear(c, cfg.n_speakers)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        x = self.net(mel)
        return self.head(x.mean(dim=2))


# --- numpy-facing helpers ---------------------------------------------------


def pad_to_multiple(values: np.ndarray, factor: int) -> np.ndarray:
    """Edge-replicate columns so the frame count divides factor."""
    t = values.shape[-1]
    pad = (-t) % factor
    if pad == 0:
        return values
    return np.pad(values, ((0, 0), (0, pad)), mode="edge")


def upsample_code(code: ContentCode, factor: int = 32) -> np.ndarray:
    """Nearest-neighbour upsampling: each code column repeated factor times."""
    return np.repeat(code.values, factor, axis=1)


class ExemplarModel:
    """Bundle of encoder + audio decoder (+ optional video decoder/discriminator)
    embodying one target style. Frozen instances are safe for concurrent
    inference; training mutates parameters from a single thread."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig = EncoderConfig(),
        audio_cfg: AudioDecoderConfig | None = None,
        video_cfg: VideoDecoderConfig | None = None,
        disc_cfg: DiscriminatorConfig | None = None,
        signal_cfg: SignalConfig = SignalConfig(),
    ):
        if audio_cfg is None:
            audio_cfg = AudioDecoderConfig(code_dim=encoder_cfg.code_dim)
        if audio_cfg.code_dim != encoder_cfg.code_dim:
            raise ModelError("audio decoder code_dim must match encoder code_dim")
        self.encoder_cfg = encoder_cfg
        self.audio_cfg = audio_cfg
        self.video_cfg = video_cfg
        self.disc_cfg = disc_cfg
        self.signal_cfg = signal_cfg
        self.encoder = ContentEncoder(encoder_cfg)
        self.audio_decoder = AudioDecoder(audio_cfg)
        self.video_decoder = VideoDecoder(video_cfg) if video_cfg else None
        self.video_disc = VideoDiscriminator(disc_cfg) if disc_cfg else None
        self.step = 0
        self.provenance: list[str] = []

    # -- mode/parameter plumbing --

    def components(self) -> dict[str, nn.Module]:
        parts = {"encoder": self.encoder, "audio_decoder": self.audio_decoder}
        if self.video_decoder is not None:
            parts["video_decoder"] = self.video_decoder
        if self.video_disc is not None:
            parts["video_disc"] = self.video_disc
        return parts

    def train(self):
        for m in self.components().values():
            m.train()
        return self

    def eval(self):
        for m in self.components().values():
            m.eval()
        return self

    def audio_parameters(self):
        return list(self.encoder.parameters()) + list(self.audio_decoder.parameters())

    @property
    def has_video(self) -> bool:
        return self.video_decoder is not None

    # -- inference ops --

    def encode(self, mel: MelSpectrogram) -> ContentCode:
        """Project a mel spectrogram to its content code (eval mode)."""
        values = pad_to_multiple(mel.values, self.encoder_cfg.downsample)
        self.encoder.eval()
        with torch.no_grad():
            code = self.encoder(torch.from_numpy(values[None].astype(np.float32)))
        return ContentCode(code[0].numpy())

    def decode_audio(self, code_up: np.ndarray) -> np.ndarray:
        """Map an upsampled code matrix to mel values in [0, 1] (eval mode)."""
        if code_up.shape[0] != self.audio_cfg.code_dim:
            raise ModelError(
                f"expected {self.audio_cfg.code_dim} code rows, got {code_up.shape[0]}"
            )
        self.audio_decoder.eval()
        with torch.no_grad():
            out = self.audio_decoder(torch.from_numpy(code_up[None].astype(np.float32)))
        return out[0].numpy()

    def decode_video(self, code_up: np.ndarray) -> np.ndarray:
        """Synthesize frames (Tv, H, W, 3) from an upsampled code matrix."""
        if self.video_decoder is None:
            raise ModelError("checkpoint has no video decoder")
        self.video_decoder.eval()
        with torch.no_grad():
            _, fine = self.video_decoder(
                torch.from_numpy(code_up[None].astype(np.float32))
            )
        return fine[0].permute(1, 2, 3, 0).numpy()

    def discriminate(self, frames: np.ndarray) -> np.ndarray:
        """Patch realness scores for (Tv, H, W, 3) frames."""
        if self.video_disc is None:
            raise ModelError("checkpoint has no video discriminator")
        self.video_disc.eval()
        with torch.no_grad():
            t = torch.from_numpy(frames.astype(np.float32)).permute(3, 0, 1, 2)[None]
            return self.video_disc(t)[0].numpy()


# --- checkpoint I/O ---------------------------------------------------------


def _write_tensors(state: dict, prefix: str, params_dir: Path, shapes: dict) -> None:
    for name, tensor in state.items():
        full = f"{prefix}.{name}"
        arr = tensor.detach().cpu().numpy().astype("<f4")
        shapes[full] = {"shape": list(arr.shape), "dtype": str(tensor.dtype).replace("torch.", "")}
        with open(params_dir / f"{full}.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(arr).tobytes())


def _read_tensors(module: nn.Module, prefix: str, params_dir: Path, shapes: dict) -> None:
    state = {}
    for name, ref in module.state_dict().items():
        full = f"{prefix}.{name}"
        if full not in shapes:
            raise CheckpointError(f"checkpoint missing tensor {full}")
        info = shapes[full]
        path = params_dir / f"{full}.bin"
        if not path.exists():
            raise CheckpointError(f"checkpoint missing tensor file {path.name}")
        arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(info["shape"]).copy()
        state[name] = torch.from_numpy(arr).to(getattr(torch, info["dtype"]))
    module.load_state_dict(state)


def save_checkpoint(model: ExemplarModel, path) -> None:
    """Write meta.json plus one little-endian float32 file per named tensor."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    shapes: dict = {}
    for prefix, module in model.components().items():
        _write_tensors(module.state_dict(), prefix, tmp / "params", shapes)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "exemplar",
        "step": model.step,
        "provenance": model.provenance,
        "signal_config": asdict(model.signal_cfg),
        "signal_config_hash": model.signal_cfg.content_hash(),
        "encoder": asdict(model.encoder_cfg),
        "audio_decoder": asdict(model.audio_cfg),
        "video_decoder": asdict(model.video_cfg) if model.video_cfg else None,
        "video_disc": asdict(model.disc_cfg) if model.disc_cfg else None,
        "tensors": shapes,
    }
    with open(tmp / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def load_checkpoint(path) -> ExemplarModel:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise CheckpointError(f"not a checkpoint directory (no meta.json): {path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    model = ExemplarModel(
        encoder_cfg=EncoderConfig(**meta["encoder"]),
        audio_cfg=AudioDecoderConfig(**meta["audio_decoder"]),
        video_cfg=VideoDecoderConfig(**meta["video_decoder"]) if meta["video_decoder"] else None,
        disc_cfg=DiscriminatorConfig(**meta["video_disc"]) if meta["video_disc"] else None,
        signal_cfg=SignalConfig(**meta["signal_config"]),
    )
    for prefix, module in model.components().items():
        _read_tensors(module, prefix, path / "params", meta["tensors"])
    model.step = meta["step"]
    model.provenance = list(meta.get("provenance", []))
    model.eval()
    return model


def save_classifier(clf: SpeakerClassifier, labels, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)
    shapes: dict = {}
    _write_tensors(clf.state_dict(), "classifier", tmp / "params", shapes)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "classifier",
        "labels": list(labels),
        "config": asdict(clf.cfg),
        "tensors": shapes,
    }
    with open(tmp / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)


def load_classifier(path) -> tuple[SpeakerClassifier, list[str]]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    if meta.get("kind") != "classifier":
        raise CheckpointError(f"{path} is not a classifier checkpoint")
    clf = SpeakerClassifier(ClassifierConfig(**meta["config"]))
    _read_tensors(clf, "classifier", path / "params", meta["tensors"])
    clf.eval()
    return clf, list(meta["labels"])


def classify_speaker(clf: SpeakerClassifier, mel: MelSpectrogram) -> np.ndarray:
    """Probability vector over enrolled speakers for one mel spectrogram."""
    clf.eval()
    with torch.no_grad():
        logits = clf(torch.from_numpy(mel.values[None].astype(np.float32)))
        probs = torch.softmax(logits[0], dim=0)
    return probs.numpy()
