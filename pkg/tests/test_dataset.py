import json

import numpy as np
import pytest

from exemplar_vc import dataset as ds
from exemplar_vc import signal as sig


@pytest.fixture()
def cfg():
    return sig.SignalConfig()


def _manifest_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestManifest:
    def test_valid_lines(self, tmp_path):
        path = _manifest_lines(
            tmp_path / "m.jsonl",
            [
                json.dumps({"id": "u1", "speaker": "a", "audio_path": "a1.wav"}),
                json.dumps({"id": "u2", "speaker": "a", "audio_path": "a2.wav", "split": "test"}),
                json.dumps({"id": "u3", "speaker": "b", "audio_path": "b1.wav", "word_label": "w"}),
            ],
        )
        records = ds.load_manifest(path)
        assert len(records) == 3
        assert records[1].split == "test"
        assert records[2].word_label == "w"

    def test_missing_field_reports_line(self, tmp_path):
        path = _manifest_lines(
            tmp_path / "m.jsonl",
            [
                json.dumps({"id": "u1", "speaker": "a", "audio_path": "x.wav"}),
                json.dumps({"id": "u2", "audio_path": "y.wav"}),
            ],
        )
        with pytest.raises(ds.ManifestError, match=":2.*speaker"):
            ds.load_manifest(path)

    def test_malformed_json_reports_line(self, tmp_path):
        path = _manifest_lines(tmp_path / "m.jsonl", ['{"id": "u1"', ""])
        with pytest.raises(ds.ManifestError, match=":1"):
            ds.load_manifest(path)

    def test_duplicate_id(self, tmp_path):
        row = json.dumps({"id": "dup", "speaker": "a", "audio_path": "x.wav"})
        path = _manifest_lines(tmp_path / "m.jsonl", [row, row])
        with pytest.raises(ds.ManifestError, match="duplicate id"):
            ds.load_manifest(path)

    def test_round_trip(self, tmp_path):
        records = [
            ds.UtteranceRecord("u1", "a", "x.wav", "train", None, "w1"),
            ds.UtteranceRecord("u2", "b", "y.wav", "test", "frames/u2", None),
        ]
        ds.save_manifest(records, tmp_path / "m.jsonl")
        assert ds.load_manifest(tmp_path / "m.jsonl") == records

    def test_bad_split_rejected(self):
        with pytest.raises(ds.ValidationError):
            ds.UtteranceRecord("u", "a", "x.wav", split="dev")


class TestBuildTrainingSet:
    def test_thirty_seconds_clip_count(self, tmp_path, cfg, rng):
        clip = sig.AudioClip(rng.uniform(-0.5, 0.5, 480000), 16000)  # 30 s
        sig.save_audio(clip, tmp_path / "long.wav")
        rec = ds.UtteranceRecord("u", "a", str(tmp_path / "long.wav"))
        mels = ds.build_training_set([rec], cfg)
        # 18 full clips + one padded 1.2 s remainder
        assert len(mels) == 19
        assert all(m.values.shape == (80, 128) for m in mels)

    def test_multi_speaker_needs_flag(self, tmp_path, cfg, rng):
        for name, spk in (("a.wav", "a"), ("b.wav", "b")):
            sig.save_audio(sig.AudioClip(rng.uniform(-0.5, 0.5, 25600), 16000), tmp_path / name)
        records = [
            ds.UtteranceRecord("u1", "a", str(tmp_path / "a.wav")),
            ds.UtteranceRecord("u2", "b", str(tmp_path / "b.wav")),
        ]
        with pytest.raises(ds.ValidationError, match="exemplar"):
            ds.build_training_set(records, cfg)
        mels = ds.build_training_set(records, cfg, allow_multi_speaker=True)
        assert len(mels) == 2

    def test_av_example_has_32_frames(self, tmp_path, cfg, rng):
        samples = rng.uniform(-0.5, 0.5, 25600)
        sig.save_audio(sig.AudioClip(samples, 16000), tmp_path / "a.wav")
        spec = ds.SynthSpeakerSpec("a", 120.0, 1.0, ("w",), seed=5)
        frames = ds.render_avatar_frames(samples, spec)
        assert frames.shape[0] == 32  # 1.6 s at 20 fps
        ds._write_frames(frames, tmp_path / "frames")
        rec = ds.UtteranceRecord("u", "a", str(tmp_path / "a.wav"), video_dir=str(tmp_path / "frames"))
        examples = ds.build_training_set([rec], cfg)
        assert isinstance(examples[0], ds.AlignedAVExample)
        assert examples[0].frames.shape == (32, 64, 64, 3)

    def test_missing_frames_alignment_error(self, tmp_path, cfg, rng):
        samples = rng.uniform(-0.5, 0.5, 25600)
        sig.save_audio(sig.AudioClip(samples, 16000), tmp_path / "a.wav")
        spec = ds.SynthSpeakerSpec("a", 120.0, 1.0, ("w",), seed=5)
        frames = ds.render_avatar_frames(samples, spec)[:20]  # too few
        ds._write_frames(frames, tmp_path / "frames")
        rec = ds.UtteranceRecord("u", "a", str(tmp_path / "a.wav"), video_dir=str(tmp_path / "frames"))
        with pytest.raises(ds.AlignmentError):
            ds.build_training_set([rec], cfg)


class TestSynthCorpus:
    def test_counts_and_layout(self, tmp_path, cfg):
        vocab = ("w0", "w1", "w2")
        specs = [
            ds.SynthSpeakerSpec("s1", 120.0, 0.95, vocab, seed=1),
            ds.SynthSpeakerSpec("s2", 200.0, 1.1, vocab, seed=2),
        ]
        records = ds.generate_synth_corpus(specs, 4, tmp_path / "c", cfg)
        assert len(records) == 2 * 3 * 4
        assert (tmp_path / "c" / "manifest.jsonl").exists()
        wavs = list((tmp_path / "c" / "wav").glob("*.wav"))
        assert len(wavs) == 24
        splits = {r.split for r in records}
        assert splits == {"train", "test"}
        # test takes disjoint from train takes per (speaker, word)
        test_ids = {r.id for r in records if r.split == "test"}
        train_ids = {r.id for r in records if r.split == "train"}
        assert not (test_ids & train_ids)

    def test_deterministic(self, tmp_path, cfg):
        vocab = ("w0", "w1")
        specs = [
            ds.SynthSpeakerSpec("s1", 120.0, 0.95, vocab, seed=7),
            ds.SynthSpeakerSpec("s2", 200.0, 1.1, vocab, seed=8),
        ]
        ds.generate_synth_corpus(specs, 2, tmp_path / "c1", cfg)
        ds.generate_synth_corpus(specs, 2, tmp_path / "c2", cfg)
        for wav in sorted((tmp_path / "c1" / "wav").glob("*.wav")):
            other = tmp_path / "c2" / "wav" / wav.name
            assert wav.read_bytes() == other.read_bytes()

    def test_needs_two_specs(self, tmp_path, cfg):
        spec = ds.SynthSpeakerSpec("s1", 120.0, 0.95, ("w",), seed=1)
        with pytest.raises(ds.ValidationError):
            ds.generate_synth_corpus([spec], 2, tmp_path / "c", cfg)

    def test_shared_vocab_required(self, tmp_path, cfg):
        specs = [
            ds.SynthSpeakerSpec("s1", 120.0, 0.95, ("w0",), seed=1),
            ds.SynthSpeakerSpec("s2", 200.0, 1.1, ("w1",), seed=2),
        ]
        with pytest.raises(ds.ValidationError, match="vocabulary"):
            ds.generate_synth_corpus(specs, 2, tmp_path / "c", cfg)

    def test_spec_validation(self):
        with pytest.raises(ds.ValidationError):
            ds.SynthSpeakerSpec("s", 50.0, 1.0, ("w",), seed=1)  # pitch too low
        with pytest.raises(ds.ValidationError):
            ds.SynthSpeakerSpec("s", 120.0, 2.0, ("w",), seed=1)  # shift too big
        with pytest.raises(ds.ValidationError):
            ds.SynthSpeakerSpec("s", 120.0, 1.0, (), seed=1)  # empty vocab

    def test_word_structure_dominates_speakers(self, tiny_corpus, cfg):
        # Same word across speakers is closer than the mean distance to
        # different words, for nearly all pairs (exhaustive check).
        records = ds.load_manifest(tiny_corpus / "manifest.jsonl")
        per = ds.clip_mels_for_records(records, cfg, root=tiny_corpus)
        items = [(r.word_label, r.speaker, mels[0].values.ravel()) for r, mels in per]
        ok = total = 0
        for i, (word_i, spk_i, x_i) in enumerate(items):
            same, diff = [], []
            for j, (word_j, spk_j, x_j) in enumerate(items):
                if spk_j == spk_i:
                    continue
                d = float(np.linalg.norm(x_i - x_j))
                (same if word_j == word_i else diff).append(d)
            ok += min(same) < np.mean(diff)
            total += 1
        assert ok / total >= 0.9


class TestAvatarFrames:
    def test_frame_count_follows_fps(self, rng):
        spec = ds.SynthSpeakerSpec("a", 120.0, 1.0, ("w",), seed=5)
        frames = ds.render_avatar_frames(rng.uniform(-0.5, 0.5, 40000), spec)
        assert frames.shape == (50, 64, 64, 3)  # 2.5 s at 20 fps
        assert frames.min() >= 0.0 and frames.max() <= 1.0

    def test_mouth_tracks_energy(self, rng):
        spec = ds.SynthSpeakerSpec("a", 120.0, 1.0, ("w",), seed=5)
        loud = np.concatenate([np.zeros(8000), 0.8 * np.sin(np.linspace(0, 800, 8000))])
        frames = ds.render_avatar_frames(loud, spec)
        # mouth region (dark pixels low in the face) larger in the loud half
        dark = (frames < 0.09).all(axis=3).sum(axis=(1, 2))
        assert dark[15:].mean() > dark[:5].mean()
