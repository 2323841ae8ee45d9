"""Command-line entry point.

Subcommands cover corpus prep, training, conversion, evaluation,
verification, and forensics. Exit codes: 0 success, 1 validation error
(bad flags, bad inputs), 2 runtime failure. Progress goes to stderr;
machine-readable output lands in files under --out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from . import evaluation as ev
from . import forensics as fo
from . import model as mdl
from . import signal as sig
from . import training as tr
from .convert import ConversionError, convert_audio, convert_av, convert_mel

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (
    ds.DatasetError,
    sig.SignalError,
    ev.EvalError,
    fo.ForensicsError,
    ConversionError,
    mdl.CheckpointError,
    mdl.ModelError,
    tr.TrainingError,  # config validation; divergence is handled first
    FileNotFoundError,
    ValueError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _seed_default() -> int:
    env = os.environ.get("EXEMPLAR_VC_SEED")
    return int(env) if env else 0


def _write_json(data, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"command": args.command, "version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        resolved[key] = str(value) if isinstance(value, Path) else value
    _write_json(resolved, out / "config.resolved.json")
    return out


def _signal_cfg(args) -> sig.SignalConfig:
    overrides = {}
    if getattr(args, "signal_json", None):
        overrides = json.loads(args.signal_json)
    if getattr(args, "griffin_lim_iters", None) is not None:
        overrides["griffin_lim_iters"] = args.griffin_lim_iters
    return sig.SignalConfig(**overrides)


def _train_cfg(args, mode=None) -> tr.TrainConfig:
    kwargs = {}
    if getattr(args, "train_json", None):
        kwargs = json.loads(args.train_json)
    if getattr(args, "steps", None) is not None:
        kwargs["max_steps"] = args.steps
    if getattr(args, "batch_size", None) is not None:
        kwargs["batch_size"] = args.batch_size
    if getattr(args, "lr", None) is not None:
        kwargs["learning_rate"] = args.lr
    kwargs.setdefault("seed", args.seed)
    if mode is not None:
        kwargs.setdefault("mode", mode)
    return tr.TrainConfig(**kwargs)


# Desk preset keeps CPU training tractable; paper preset is the full-size net.
_PRESETS = {
    "paper": (mdl.EncoderConfig(), None),
    "desk": (
        mdl.EncoderConfig(conv_channels=64, cell_dim=32),
        mdl.AudioDecoderConfig(code_dim=64, pre_lstm=64, conv_channels=64, post_lstm=128),
    ),
}


def _model_cfgs(args):
    return _PRESETS[getattr(args, "preset", "desk")]


def _records_for(args, require_word_labels=False):
    records = ds.load_manifest(args.manifest)
    root = Path(args.manifest).parent
    if getattr(args, "speaker", None):
        records = [r for r in records if r.speaker == args.speaker]
        if not records:
            raise ds.ValidationError(f"no records for speaker '{args.speaker}'")
    if getattr(args, "split", None):
        records = [r for r in records if r.split == args.split]
        if not records:
            raise ds.ValidationError(f"no records in split '{args.split}'")
    if require_word_labels and any(r.word_label is None for r in records):
        raise ds.ValidationError("this command needs word_label on every record")
    return records, root


def _parse_ckpt_pairs(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ds.ValidationError(f"--ckpt expects SPEAKER=PATH, got '{pair}'")
        speaker, path = pair.split("=", 1)
        out[speaker] = mdl.load_checkpoint(path)
    return out


# --- subcommand handlers -----------------------------------------------------


def cmd_synth_corpus(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    if args.spec_json:
        raw = json.loads(Path(args.spec_json).read_text(encoding="utf-8"))
        specs = [ds.SynthSpeakerSpec(**item) for item in raw]
    else:
        rng = np.random.default_rng(args.seed)
        vocab = tuple(f"word{i}" for i in range(args.words))
        pitches = np.linspace(125.0, 245.0, args.speakers)
        shifts = np.linspace(0.94, 1.18, args.speakers)
        specs = [
            ds.SynthSpeakerSpec(
                speaker_id=f"spk{chr(65 + i)}",
                pitch_hz=float(pitches[i]),
                formant_shift=float(shifts[i]),
                vocab=vocab,
                seed=int(rng.integers(0, 2**31)),
                noise_level=0.02,
            )
            for i in range(args.speakers)
        ]
    records = ds.generate_synth_corpus(
        specs, args.takes, out, cfg, with_video=args.video
    )
    _log(f"wrote {len(records)} utterances under {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    records, root = _records_for(args)
    mel_dir = out / "mels"
    index = []
    for rec, mels in ds.clip_mels_for_records(records, cfg, root=root):
        for i, mel in enumerate(mels):
            rel = f"mels/{rec.id}_{i:03d}.mel"
            sig.save_mel(mel, out / rel)
            index.append(
                {"record": rec.id, "speaker": rec.speaker, "split": rec.split,
                 "word_label": rec.word_label, "clip": i, "path": rel}
            )
    _write_json({"clips": index, "signal_config_hash": cfg.content_hash()}, out / "index.json")
    _log(f"prepared {len(index)} clips")
    return EXIT_OK


def _load_training_mels(args, cfg):
    records, root = _records_for(args)
    train = [r for r in records if r.split == "train"]
    return ds.build_training_set(
        train, cfg, allow_multi_speaker=args.allow_multi_speaker, root=root
    )


def cmd_train_audio(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    examples = _load_training_mels(args, cfg)
    enc_cfg, dec_cfg = _model_cfgs(args)
    _log(f"training on {len(examples)} clips ({args.preset} preset)")
    _, report = tr.train_exemplar(
        examples, _train_cfg(args), encoder_cfg=enc_cfg, audio_cfg=dec_cfg,
        signal_cfg=cfg, out_dir=out,
    )
    _log(f"final mel L1 {report.final.get('mel_l1'):.4f} after {len(report.steps)} steps")
    return EXIT_OK


def cmd_finetune(args) -> int:
    out = _resolve_out(args)
    base = mdl.load_checkpoint(args.base)
    cfg = base.signal_cfg
    examples = _load_training_mels(args, cfg)
    _log(f"finetuning {args.base} on {len(examples)} clips")
    _, report = tr.finetune(base, examples, _train_cfg(args), out_dir=out)
    _log(f"finetune done after {len(report.steps)} steps")
    return EXIT_OK


def cmd_train_av(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    examples = _load_training_mels(args, cfg)
    av = [x for x in examples if isinstance(x, ds.AlignedAVExample)]
    if not av:
        raise ds.ValidationError("manifest has no video; train-av needs AV records")
    base = mdl.load_checkpoint(args.base) if args.base else None
    enc_cfg, dec_cfg = _model_cfgs(args)
    video_cfg = mdl.VideoDecoderConfig(
        code_dim=enc_cfg.code_dim,
        base_channels=args.video_channels,
        stage1_size=av[0].frames.shape[1] // 2,
    )
    disc_cfg = mdl.DiscriminatorConfig(base_channels=max(8, args.video_channels // 2))
    _log(f"AV training ({args.mode}) on {len(av)} examples")
    _, report = tr.train_av(
        av, _train_cfg(args, mode=args.mode), base=base,
        encoder_cfg=enc_cfg, audio_cfg=dec_cfg, video_cfg=video_cfg,
        disc_cfg=disc_cfg, signal_cfg=cfg, out_dir=out,
    )
    _log(f"final video L1 {report.final.get('video_l1'):.4f}")
    return EXIT_OK


def cmd_convert(args) -> int:
    out = _resolve_out(args)
    model = mdl.load_checkpoint(args.ckpt)
    clip = sig.load_audio(args.input, model.signal_cfg.sample_rate)
    if model.has_video:
        result = convert_av(clip, model)
    else:
        result = convert_audio(clip, model)
    result.write(out, checkpoint_id=str(args.ckpt))
    _log(f"converted {args.input} -> {out / 'converted.wav'}")
    return EXIT_OK


def cmd_train_speaker_clf(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    records, root = _records_for(args)
    train = [r for r in records if r.split == "train"]
    labels = sorted({r.speaker for r in train})
    if len(labels) < 2:
        raise ds.ValidationError("speaker classifier needs >= 2 speakers")
    mels, y = [], []
    for rec, rec_mels in ds.clip_mels_for_records(train, cfg, root=root):
        for mel in rec_mels:
            mels.append(mel)
            y.append(labels.index(rec.speaker))
    clf_cfg = mdl.ClassifierConfig(channels=args.channels, n_speakers=len(labels))
    clf, report = tr.train_classifier(mels, y, len(labels), _train_cfg(args), clf_cfg)
    mdl.save_classifier(clf, labels, out / "classifier")
    _write_json({"labels": labels, "final_xent": report.final.get("xent")}, out / "summary.json")
    _log(f"classifier trained on {len(mels)} clips over {labels}")
    return EXIT_OK


def cmd_eval_mcd(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    ref = sig.load_audio(args.reference, cfg.sample_rate)
    syn = sig.load_audio(args.synthesized, cfg.sample_rate)
    value = ev.mcd(ref, syn, cfg, align=not args.no_dtw)
    ev.MetricReport(mcd=value).write(out / "metrics.json")
    _log(f"MCD {value:.2f}")
    return EXIT_OK


def cmd_eval_sca(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    clf, labels = mdl.load_classifier(args.classifier)
    ckpts = _parse_ckpt_pairs(args.ckpt)
    records, root = _records_for(args)
    test = [r for r in records if r.split == "test"]
    conversions = []
    for target, model in sorted(ckpts.items()):
        sources = [r for r in test if r.speaker != target]
        for rec, mels in ds.clip_mels_for_records(sources, cfg, root=root):
            for mel in mels:
                converted, _ = convert_mel(model, mel)
                conversions.append((converted, target))
    value = ev.sca(conversions, clf, labels)
    ev.MetricReport(sca=value).write(out / "metrics.json")
    _log(f"SCA {value:.1f}% over {len(conversions)} conversions")
    return EXIT_OK


def cmd_verify_reprojection(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    model_a = mdl.load_checkpoint(args.model_a)
    clf, labels = mdl.load_classifier(args.classifier)
    records, root = _records_for(args, require_word_labels=True)

    def word_mels(speaker, split):
        recs = [r for r in records if r.speaker == speaker and r.split == split]
        out_items = []
        for rec, mels in ds.clip_mels_for_records(recs, cfg, root=root):
            for mel in mels:
                out_items.append((rec.word_label, mel))
        return out_items

    words_a = word_mels(args.speaker_a, "train")
    words_b = word_mels(args.speaker_b, "test")
    report = ev.verify_reprojection(model_a, words_a, words_b, clf, labels, args.speaker_a)
    _write_json(report.to_json(), out / "reprojection.json")
    (out / "reprojection.txt").write_text(report.to_table() + "\n", encoding="utf-8")
    _log(report.to_table())
    return EXIT_OK


def cmd_cluster_words(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    records, root = _records_for(args, require_word_labels=True)
    items = []
    for rec, mels in ds.clip_mels_for_records(records, cfg, root=root):
        for mel in mels:
            items.append((rec.word_label, rec.speaker, mel))
    result = ev.word_cluster_analysis(items)
    _write_json(result.to_json(), out / "clusters.json")
    np.save(out / "distances.npy", result.distances)
    _log(f"word purity {result.purity:.3f} over {len(items)} items")
    return EXIT_OK


def cmd_linear_oracle(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    records, root = _records_for(args)
    train = [r for r in records if r.split == "train"]
    probes = [r for r in records if r.split == "test"][: args.probes]
    train_mels = [m for _, mels in ds.clip_mels_for_records(train, cfg, root=root) for m in mels]
    probe_mels = [m for _, mels in ds.clip_mels_for_records(probes, cfg, root=root) for m in mels]
    probe_mels = probe_mels[: args.probes]
    if not probe_mels:
        raise ds.ValidationError("no test-split probes available")
    results = ev.linear_projection_oracles(
        train_mels, probe_mels, args.bottleneck, seed=args.seed
    )
    rows = [
        {"probe": i, "pca_residual": res.pca_residual,
         "ae_residual": res.ae_residual, "relative_gap": res.relative_gap}
        for i, res in enumerate(results)
    ]
    _write_json({"bottleneck": args.bottleneck, "probes": rows}, out / "linear_oracle.json")
    _log(f"max relative gap {max(r['relative_gap'] for r in rows):.4f} over {len(rows)} probes")
    return EXIT_OK


def _forensic_rows(records, cfg, root):
    rows = []
    for rec, mels in ds.clip_mels_for_records(records, cfg, root=root):
        for i, mel in enumerate(mels):
            rows.append((f"{rec.id}_{i:03d}", rec.speaker, rec.split, mel))
    return rows


def cmd_train_forensic(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    ckpts = _parse_ckpt_pairs(args.ckpt)
    records, root = _records_for(args)
    rows = _forensic_rows(records, cfg, root)
    dataset = fo.build_forensic_dataset(rows, ckpts, args.hold_out)
    dataset.write_manifest(out / "forensic_manifest.jsonl")
    clf, report = fo.train_forensic(
        dataset, _train_cfg(args), shuffle_labels=args.shuffle_labels
    )
    mdl.save_classifier(clf, [fo.REAL, fo.FAKE], out / "classifier")
    _write_json(
        {"counts": dataset.counts(), "final_xent": report.final.get("xent")},
        out / "summary.json",
    )
    _log(f"forensic discriminator trained; counts {dataset.counts()}")
    return EXIT_OK


def cmd_eval_forensic(args) -> int:
    out = _resolve_out(args)
    cfg = _signal_cfg(args)
    ckpts = _parse_ckpt_pairs(args.ckpt)
    clf, _ = mdl.load_classifier(args.classifier)
    records, root = _records_for(args)
    rows = _forensic_rows(records, cfg, root)
    dataset = fo.build_forensic_dataset(rows, ckpts, args.hold_out)
    report = fo.eval_forensic(clf, dataset.split("test"))
    report.write(out / "forensic_report.json")
    _log(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_video_metrics(args) -> int:
    out = _resolve_out(args)
    gen = ds._load_frame_dir(Path(args.generated))
    ref = ds._load_frame_dir(Path(args.reference))
    mse, psnr = ev.video_metrics(gen, ref)
    ev.MetricReport(video_mse=mse, video_psnr=psnr).write(out / "metrics.json")
    _log(f"MSE {mse:.3f}  PSNR {psnr:.3f} dB")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _add_common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=_seed_default())
    p.add_argument("--signal-json", help="JSON object of SignalConfig overrides")


def _add_train_flags(p):
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-json", help="JSON object of TrainConfig overrides")
    p.add_argument("--preset", choices=sorted(_PRESETS), default="desk")


def build_parser() -> _Parser:
    parser = _Parser(prog="exemplar-vc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="render a synthetic speaker corpus")
    _add_common(p)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--words", type=int, default=10)
    p.add_argument("--takes", type=int, default=8, help="utterances per word")
    p.add_argument("--video", action="store_true", help="also render avatar frames")
    p.add_argument("--spec-json", help="JSON file with explicit speaker specs")
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("prepare", help="segment a manifest into serialized mels")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker")
    p.add_argument("--split")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-audio", help="train an exemplar audio autoencoder")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker")
    p.add_argument("--allow-multi-speaker", action="store_true")
    p.set_defaults(func=cmd_train_audio)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a new target")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--base", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker")
    p.add_argument("--allow-multi-speaker", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-av", help="train the video decoder (+ modes)")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker")
    p.add_argument("--base", help="pretrained audio checkpoint")
    p.add_argument("--mode", default="av_joint", choices=tr.AV_MODES)
    p.add_argument("--video-channels", type=int, default=16)
    p.add_argument("--allow-multi-speaker", action="store_true")
    p.set_defaults(func=cmd_train_av)

    p = sub.add_parser("convert", help="convert input speech to the target style")
    _add_common(p)
    p.add_argument("--in", dest="input", required=True, help="input WAV")
    p.add_argument("--ckpt", required=True, help="target checkpoint directory")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train-speaker-clf", help="train the speaker classifier")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--channels", type=int, default=64)
    p.set_defaults(func=cmd_train_speaker_clf)

    p = sub.add_parser("eval-mcd", help="mel-cepstral distortion between two WAVs")
    _add_common(p)
    p.add_argument("--ref", dest="reference", required=True)
    p.add_argument("--syn", dest="synthesized", required=True)
    p.add_argument("--no-dtw", action="store_true")
    p.set_defaults(func=cmd_eval_mcd)

    p = sub.add_parser("eval-sca", help="speaker-classification accuracy of conversions")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--ckpt", action="append", required=True, metavar="SPEAKER=PATH")
    p.set_defaults(func=cmd_eval_sca)

    p = sub.add_parser("verify-reprojection", help="word-level reprojection table")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-a", required=True)
    p.add_argument("--speaker-a", required=True)
    p.add_argument("--speaker-b", required=True)
    p.add_argument("--classifier", required=True)
    p.set_defaults(func=cmd_verify_reprojection)

    p = sub.add_parser("cluster-words", help="cross-speaker word clustering purity")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.set_defaults(func=cmd_cluster_words)

    p = sub.add_parser("linear-oracle", help="PCA vs linear autoencoder comparison")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bottleneck", type=int, default=8)
    p.add_argument("--probes", type=int, default=20)
    p.set_defaults(func=cmd_linear_oracle)

    p = sub.add_parser("train-forensic", help="train the real/fake discriminator")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", action="append", required=True, metavar="SPEAKER=PATH")
    p.add_argument("--hold-out", action="append", default=[], help="out-of-set speaker")
    p.add_argument("--shuffle-labels", action="store_true", help="chance-level control")
    p.set_defaults(func=cmd_train_forensic)

    p = sub.add_parser("eval-forensic", help="evaluate the real/fake discriminator")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", action="append", required=True, metavar="SPEAKER=PATH")
    p.add_argument("--classifier", required=True)
    p.add_argument("--hold-out", action="append", default=[])
    p.set_defaults(func=cmd_eval_forensic)

    p = sub.add_parser("video-metrics", help="MSE/PSNR between two frame directories")
    _add_common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.set_defaults(func=cmd_video_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except tr.TrainingDiverged as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
