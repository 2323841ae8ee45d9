"""Shared fixtures: synthetic corpora and trained desk-scale models.

Expensive artifacts (corpora, checkpoints) are cached on disk between runs;
delete the cache directory (or set EXVC_TEST_CACHE_DIR) to force a cold
build. Everything is seeded, so cached and fresh runs are identical.
"""

import os
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch

from exemplar_vc import dataset as ds
from exemplar_vc import model as mdl
from exemplar_vc import signal as sig
from exemplar_vc import training as tr

CACHE_VERSION = "v1"

# Desk-scale model: small enough to train on 2 CPU cores in minutes, big
# enough to transfer style on the synthetic corpus.
DESK_ENCODER = mdl.EncoderConfig(conv_channels=64, cell_dim=32)
DESK_DECODER = mdl.AudioDecoderConfig(
    code_dim=64, pre_lstm=64, conv_channels=64, post_lstm=128
)
DESK_STEPS = 1200

TINY_ENCODER = mdl.EncoderConfig(conv_channels=32, cell_dim=16)
TINY_DECODER = mdl.AudioDecoderConfig(
    code_dim=32, pre_lstm=32, conv_channels=32, post_lstm=64
)

VOCAB = tuple(f"word{i}" for i in range(10))
SPEAKERS = {
    "spkA": dict(pitch_hz=125.0, formant_shift=0.94, seed=11),
    "spkB": dict(pitch_hz=185.0, formant_shift=1.10, seed=22),
    "spkC": dict(pitch_hz=245.0, formant_shift=1.02, seed=33),
}
TAKES = 8


def cache_root() -> Path:
    root = Path(
        os.environ.get(
            "EXVC_TEST_CACHE_DIR",
            Path(tempfile.gettempdir()) / "exemplar_vc_test_cache",
        )
    )
    path = root / CACHE_VERSION
    path.mkdir(parents=True, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def signal_cfg() -> sig.SignalConfig:
    return sig.SignalConfig()


@pytest.fixture(scope="session")
def corpus(signal_cfg) -> Path:
    """3-speaker, 10-word, 8-take synthetic corpus (audio only)."""
    out = cache_root() / "corpus3"
    if not (out / "manifest.jsonl").exists():
        specs = [
            ds.SynthSpeakerSpec(
                speaker_id=name, vocab=VOCAB, noise_level=0.02, **params
            )
            for name, params in SPEAKERS.items()
        ]
        ds.generate_synth_corpus(specs, TAKES, out, signal_cfg)
    return out


@pytest.fixture(scope="session")
def corpus_mels(corpus, signal_cfg):
    """{(speaker, split): [(record, mel), ...]} with one clip per utterance."""
    records = ds.load_manifest(corpus / "manifest.jsonl")
    table = {}
    for rec, mels in ds.clip_mels_for_records(records, signal_cfg, root=corpus):
        table.setdefault((rec.speaker, rec.split), []).append((rec, mels[0]))
    return table


@pytest.fixture(scope="session")
def av_corpus(signal_cfg) -> Path:
    """2-speaker, 6-word, 6-take corpus with 64x64 avatar frames."""
    out = cache_root() / "corpus_av"
    if not (out / "manifest.jsonl").exists():
        vocab = tuple(f"word{i}" for i in range(6))
        specs = [
            ds.SynthSpeakerSpec("avA", 125.0, 0.94, vocab, seed=311, noise_level=0.02),
            ds.SynthSpeakerSpec("avB", 185.0, 1.10, vocab, seed=322, noise_level=0.02),
        ]
        ds.generate_synth_corpus(specs, 6, out, signal_cfg, with_video=True)
    return out


def _train_cached_exemplar(path: Path, mels, steps: int, seed: int, cfg) -> mdl.ExemplarModel:
    if (path / "meta.json").exists():
        return mdl.load_checkpoint(path)
    model, _ = tr.train_exemplar(
        mels,
        tr.TrainConfig(max_steps=steps, seed=seed),
        encoder_cfg=DESK_ENCODER,
        audio_cfg=DESK_DECODER,
        signal_cfg=cfg,
    )
    mdl.save_checkpoint(model, path)
    return mdl.load_checkpoint(path)


@pytest.fixture(scope="session")
def model_a(corpus_mels, signal_cfg) -> mdl.ExemplarModel:
    mels = [m for _, m in corpus_mels[("spkA", "train")]]
    return _train_cached_exemplar(cache_root() / "ckpt_a", mels, DESK_STEPS, 100, signal_cfg)


@pytest.fixture(scope="session")
def model_b(corpus_mels, signal_cfg) -> mdl.ExemplarModel:
    mels = [m for _, m in corpus_mels[("spkB", "train")]]
    return _train_cached_exemplar(cache_root() / "ckpt_b", mels, DESK_STEPS, 200, signal_cfg)


@pytest.fixture(scope="session")
def model_c(corpus_mels, signal_cfg) -> mdl.ExemplarModel:
    # The forensic hold-out target trains longer: a better-converged unseen
    # model makes harder out-of-set fakes, mirroring the in-the-wild setting.
    mels = [m for _, m in corpus_mels[("spkC", "train")]]
    return _train_cached_exemplar(cache_root() / "ckpt_c", mels, 1800, 300, signal_cfg)


@pytest.fixture(scope="session")
def model_a_path(model_a) -> Path:
    return cache_root() / "ckpt_a"


@pytest.fixture(scope="session")
def model_b_path(model_b) -> Path:
    return cache_root() / "ckpt_b"


@pytest.fixture(scope="session")
def speaker_clf(corpus_mels):
    """Speaker classifier enrolled on spkA/spkB training clips."""
    path = cache_root() / "clf_ab"
    if (path / "meta.json").exists():
        return mdl.load_classifier(path)
    mels, labels = [], []
    for i, speaker in enumerate(("spkA", "spkB")):
        for _, mel in corpus_mels[(speaker, "train")]:
            mels.append(mel)
            labels.append(i)
    clf, _ = tr.train_classifier(
        mels,
        labels,
        2,
        tr.TrainConfig(max_steps=300, seed=1, batch_size=16),
        mdl.ClassifierConfig(channels=64, n_speakers=2),
    )
    mdl.save_classifier(clf, ["spkA", "spkB"], path)
    return mdl.load_classifier(path)


@pytest.fixture(scope="session")
def tiny_corpus(signal_cfg) -> Path:
    """Small 2-speaker corpus for fast CLI and unit tests."""
    out = cache_root() / "corpus_tiny"
    if not (out / "manifest.jsonl").exists():
        vocab = ("word0", "word1", "word2")
        specs = [
            ds.SynthSpeakerSpec("tA", 130.0, 0.95, vocab, seed=911, noise_level=0.02),
            ds.SynthSpeakerSpec("tB", 190.0, 1.08, vocab, seed=922, noise_level=0.02),
        ]
        ds.generate_synth_corpus(specs, 3, out, signal_cfg)
    return out


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _stable_torch_seed():
    torch.manual_seed(4242)
    yield
