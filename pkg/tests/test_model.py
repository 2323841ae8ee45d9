import inspect
import json

import numpy as np
import pytest
import torch

from exemplar_vc import convert as cv
from exemplar_vc import model as mdl
from exemplar_vc import signal as sig

SMALL_ENC = mdl.EncoderConfig(conv_channels=16, cell_dim=8)
SMALL_DEC = mdl.AudioDecoderConfig(code_dim=16, pre_lstm=16, conv_channels=16, post_lstm=32)
SMALL_VID = mdl.VideoDecoderConfig(code_dim=16, base_channels=4, stage1_size=16)
SMALL_DISC = mdl.DiscriminatorConfig(base_channels=4)


def _mel(rng, frames=128):
    return sig.MelSpectrogram(rng.uniform(0, 1, (80, frames)).astype(np.float32))


@pytest.fixture(scope="module")
def paper_model():
    torch.manual_seed(0)
    return mdl.ExemplarModel()


class TestEncoder:
    def test_paper_shape_64x4(self, paper_model, rng):
        code = paper_model.encode(_mel(rng, 128))
        assert code.values.shape == (64, 4)

    def test_double_length(self, paper_model, rng):
        assert paper_model.encode(_mel(rng, 256)).values.shape == (64, 8)

    def test_padding_contract(self, paper_model, rng):
        # 100 frames pad (edge-replicate) to 128 before encoding
        assert paper_model.encode(_mel(rng, 100)).values.shape == (64, 4)

    def test_bottleneck_compression_ratio(self, paper_model, rng):
        mel = _mel(rng, 128)
        code = paper_model.encode(mel)
        assert mel.values.size / code.values.size == 40.0

    def test_deterministic_in_eval(self, paper_model, rng):
        mel = _mel(rng, 128)
        a = paper_model.encode(mel).values
        b = paper_model.encode(mel).values
        np.testing.assert_array_equal(a, b)


class TestUpsample:
    def test_shape(self, rng):
        code = mdl.ContentCode(rng.standard_normal((64, 4)).astype(np.float32))
        up = mdl.upsample_code(code)
        assert up.shape == (64, 128)

    def test_column_law(self, rng):
        code = mdl.ContentCode(rng.standard_normal((64, 5)).astype(np.float32))
        up = mdl.upsample_code(code, 32)
        for j in range(up.shape[1]):
            np.testing.assert_array_equal(up[:, j], code.values[:, j // 32])

    def test_pipeline_shape_trace(self, rng):
        torch.manual_seed(1)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        mel = _mel(rng, 160)
        code = model.encode(mel)
        up = mdl.upsample_code(code)
        out = model.decode_audio(up)
        assert out.shape == (80, 160)


class TestAudioDecoder:
    def test_shape(self, rng):
        torch.manual_seed(1)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        out = model.decode_audio(rng.standard_normal((16, 128)).astype(np.float32))
        assert out.shape == (80, 128)

    def test_output_in_unit_interval(self, rng):
        torch.manual_seed(2)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        out = model.decode_audio(5.0 * rng.standard_normal((16, 64)).astype(np.float32))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_wrong_rows_rejected(self, rng):
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        with pytest.raises(mdl.ModelError, match="code rows"):
            model.decode_audio(rng.standard_normal((8, 64)).astype(np.float32))


class TestVideoDecoder:
    def test_one_clip_32_frames_128px(self, rng):
        # Default (paper-scale) video config: stage 1 at 64, stage 2 at 128.
        torch.manual_seed(3)
        model = mdl.ExemplarModel(
            mdl.EncoderConfig(conv_channels=16, cell_dim=32),
            mdl.AudioDecoderConfig(code_dim=64, pre_lstm=16, conv_channels=16, post_lstm=32),
            mdl.VideoDecoderConfig(code_dim=64, base_channels=8),
            mdl.DiscriminatorConfig(base_channels=8),
        )
        up = rng.standard_normal((64, 128)).astype(np.float32)
        frames = model.decode_video(up)
        assert frames.shape == (32, 128, 128, 3)

    def test_zero_code_finite(self, rng):
        torch.manual_seed(4)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC, SMALL_VID, SMALL_DISC)
        frames = model.decode_video(np.zeros((16, 128), dtype=np.float32))
        assert np.all(np.isfinite(frames))
        assert frames.min() >= 0.0 and frames.max() <= 1.0

    def test_two_clips_double_frames(self, rng):
        torch.manual_seed(5)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC, SMALL_VID, SMALL_DISC)
        one = model.decode_video(rng.standard_normal((16, 128)).astype(np.float32))
        two = model.decode_video(rng.standard_normal((16, 256)).astype(np.float32))
        assert one.shape[0] == 32 and two.shape[0] == 64

    def test_stage_resolutions_double(self):
        cfg = mdl.VideoDecoderConfig(stage1_size=32)
        assert cfg.stage2_size == 64


class TestDiscriminator:
    def test_patch_scores(self, rng):
        torch.manual_seed(6)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC, SMALL_VID, SMALL_DISC)
        frames = rng.uniform(0, 1, (32, 32, 32, 3)).astype(np.float32)
        scores = model.discriminate(frames)
        assert scores.size >= 1
        assert np.all(np.isfinite(scores))

    def test_constant_image_finite(self):
        torch.manual_seed(7)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC, SMALL_VID, SMALL_DISC)
        frames = np.full((32, 32, 32, 3), 0.5, dtype=np.float32)
        assert np.all(np.isfinite(model.discriminate(frames)))


class TestSpeakerClassifier:
    def test_probabilities_sum_to_one(self, rng):
        torch.manual_seed(8)
        clf = mdl.SpeakerClassifier(mdl.ClassifierConfig(channels=16, n_speakers=3))
        probs = mdl.classify_speaker(clf, _mel(rng))
        assert probs.shape == (3,)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_uniform_noise_valid(self, rng):
        torch.manual_seed(9)
        clf = mdl.SpeakerClassifier(mdl.ClassifierConfig(channels=16, n_speakers=2))
        probs = mdl.classify_speaker(clf, _mel(rng))
        assert np.all(probs >= 0.0) and probs.sum() == pytest.approx(1.0, abs=1e-6)


class TestCheckpoint:
    def test_save_load_resave_byte_stable(self, tmp_path, rng):
        torch.manual_seed(10)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC, SMALL_VID, SMALL_DISC)
        model.step = 17
        mdl.save_checkpoint(model, tmp_path / "ck1")
        loaded = mdl.load_checkpoint(tmp_path / "ck1")
        mdl.save_checkpoint(loaded, tmp_path / "ck2")
        files1 = sorted((tmp_path / "ck1").rglob("*"))
        files2 = sorted((tmp_path / "ck2").rglob("*"))
        assert [f.name for f in files1] == [f.name for f in files2]
        for f1, f2 in zip(files1, files2):
            if f1.is_file():
                assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_weights_survive_round_trip(self, tmp_path, rng):
        torch.manual_seed(11)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        mel = _mel(rng, 128)
        before = model.decode_audio(mdl.upsample_code(model.encode(mel)))
        mdl.save_checkpoint(model, tmp_path / "ck")
        loaded = mdl.load_checkpoint(tmp_path / "ck")
        after = loaded.decode_audio(mdl.upsample_code(loaded.encode(mel)))
        np.testing.assert_array_equal(before, after)

    def test_config_hash_guard(self, tmp_path, rng):
        torch.manual_seed(12)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        mdl.save_checkpoint(model, tmp_path / "ck")
        loaded = mdl.load_checkpoint(tmp_path / "ck")
        other_cfg = sig.SignalConfig(n_mels=64)
        clip = sig.AudioClip(rng.uniform(-0.5, 0.5, 25600), 16000)
        with pytest.raises(cv.ConfigHashMismatch, match="hash"):
            cv.convert_audio(clip, loaded, other_cfg)

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(mdl.CheckpointError, match="meta.json"):
            mdl.load_checkpoint(tmp_path)

    def test_meta_is_plain_json(self, tmp_path):
        torch.manual_seed(13)
        model = mdl.ExemplarModel(SMALL_ENC, SMALL_DEC)
        mdl.save_checkpoint(model, tmp_path / "ck")
        meta = json.loads((tmp_path / "ck" / "meta.json").read_text())
        assert meta["format_version"] == 1
        assert meta["signal_config_hash"] == sig.SignalConfig().content_hash()

    def test_classifier_round_trip(self, tmp_path, rng):
        torch.manual_seed(14)
        clf = mdl.SpeakerClassifier(mdl.ClassifierConfig(channels=16, n_speakers=2))
        mdl.save_classifier(clf, ["x", "y"], tmp_path / "clf")
        loaded, labels = mdl.load_classifier(tmp_path / "clf")
        assert labels == ["x", "y"]
        mel = _mel(rng)
        np.testing.assert_array_equal(
            mdl.classify_speaker(clf, mel), mdl.classify_speaker(loaded, mel)
        )


class TestNoSpeakerInput:
    def test_conversion_path_takes_no_identity(self):
        # The conversion path must be a pure function of audio: no function
        # in it accepts a speaker/style/identity argument.
        funcs = [
            mdl.ExemplarModel.encode,
            mdl.ExemplarModel.decode_audio,
            mdl.ExemplarModel.decode_video,
            mdl.ContentEncoder.forward,
            mdl.AudioDecoder.forward,
            mdl.VideoDecoder.forward,
            mdl.upsample_code,
            cv.convert_audio,
            cv.convert_av,
            cv.convert_mel,
        ]
        banned = ("speaker", "identity", "style", "embedding")
        for fn in funcs:
            for name in inspect.signature(fn).parameters:
                assert not any(b in name.lower() for b in banned), (fn, name)
