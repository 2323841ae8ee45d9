"""Fake-audio forensics: build real/fake corpora by running conversions,
train a binary discriminator on the speaker-classifier backbone, and report
accuracy within and out of the enrolled speaker set.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convert import convert_mel
from .model import ClassifierConfig, SpeakerClassifier, classify_speaker
from .signal import MelSpectrogram
from .training import TrainConfig, TrainReport, train_classifier

REAL, FAKE = "real", "fake"


class ForensicsError(Exception):
    pass


@dataclass(frozen=True)
class ForensicItem:
    mel: MelSpectrogram
    label: str  # real | fake
    speaker: str  # for fakes: the conversion target
    utterance_id: str  # source utterance; splits stay disjoint on this id
    split: str = "train"
    in_set: bool = True
    style_tag: str | None = None
    source_checkpoint: str | None = None


@dataclass
class ForensicDataset:
    items: list

    def split(self, name: str) -> list:
        return [it for it in self.items if it.split == name]

    def counts(self) -> dict:
        out: dict = {}
        for it in self.items:
            key = f"{it.split}/{it.label}/{'in' if it.in_set else 'out'}"
            out[key] = out.get(key, 0) + 1
        return out

    def check_disjoint(self) -> None:
        train_ids = {it.utterance_id for it in self.items if it.split == "train"}
        test_ids = {it.utterance_id for it in self.items if it.split == "test"}
        overlap = train_ids & test_ids
        if overlap:
            raise ForensicsError(
                f"utterances appear in both splits: {sorted(overlap)[:5]}"
            )

    def write_manifest(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for it in self.items:
                row = {
                    "label": it.label,
                    "speaker": it.speaker,
                    "utterance_id": it.utterance_id,
                    "split": it.split,
                    "in_set": it.in_set,
                }
                if it.style_tag:
                    row["style_tag"] = it.style_tag
                if it.source_checkpoint:
                    row["source_checkpoint"] = it.source_checkpoint
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _stable_pick(options, key: str) -> str:
    return options[zlib.crc32(key.encode("utf-8")) % len(options)]


def build_forensic_dataset(
    real_utterances,
    checkpoints,
    out_of_set_speakers=(),
) -> ForensicDataset:
    """Pair real utterances with fakes made by cross-speaker conversion.

    Every in-set real sentence is converted into a *different* in-set
    speaker's model (stable round-robin) to form the in-set fakes. For each
    held-out speaker, in-set test sentences are additionally converted through
    the held-out model to form out-of-set fakes, which the discriminator never
    trains on.

    real_utterances: iterable of (utterance_id, speaker, split,
    MelSpectrogram[, style_tag]) tuples. checkpoints: {speaker: ExemplarModel}.
    """
    checkpoints = dict(checkpoints)
    if len(checkpoints) < 2:
        raise ForensicsError("need checkpoints for at least 2 speakers")
    out_of_set = set(out_of_set_speakers)
    in_set_targets = sorted(s for s in checkpoints if s not in out_of_set)
    if len(in_set_targets) < 2:
        raise ForensicsError("need at least 2 in-set speakers with checkpoints")

    items = []
    rows = [tuple(r) for r in real_utterances]
    for row in rows:
        uid, speaker, split, mel = row[:4]
        style = row[4] if len(row) > 4 else None
        in_set = speaker not in out_of_set
        items.append(ForensicItem(mel, REAL, speaker, uid, split, in_set, style))
        if not in_set:
            continue
        others = [s for s in in_set_targets if s != speaker]
        target = _stable_pick(others, uid)
        converted, _ = convert_mel(checkpoints[target], mel)
        items.append(
            ForensicItem(converted, FAKE, target, uid, split, True, style, target)
        )

    # Out-of-set fakes: unseen checkpoints impersonating the held-out speaker.
    for held_out in sorted(out_of_set):
        if held_out not in checkpoints:
            continue
        for row in rows:
            uid, speaker, split, mel = row[:4]
            style = row[4] if len(row) > 4 else None
            if speaker in out_of_set or split != "test":
                continue
            converted, _ = convert_mel(checkpoints[held_out], mel)
            items.append(
                ForensicItem(
                    converted, FAKE, held_out, uid, "test", False, style, held_out
                )
            )
    ds = ForensicDataset(items)
    ds.check_disjoint()
    return ds


def train_forensic(
    dataset: ForensicDataset,
    cfg: TrainConfig,
    clf_cfg: ClassifierConfig | None = None,
    shuffle_labels: bool = False,
) -> tuple[SpeakerClassifier, TrainReport]:
    """Binary real/fake discriminator over compressed mels; in-set train split
    only. shuffle_labels trains the chance-level control."""
    train_items = [it for it in dataset.split("train") if it.in_set]
    labels = [0 if it.label == REAL else 1 for it in train_items]
    if len(set(labels)) < 2:
        raise ForensicsError("train split must contain both real and fake items")
    if shuffle_labels:
        rng = np.random.default_rng(cfg.seed + 104729)
        labels = list(rng.permutation(labels))
    mels = [it.mel for it in train_items]
    clf_cfg = clf_cfg or ClassifierConfig(
        n_mels=mels[0].values.shape[0], channels=64, n_speakers=2
    )
    return train_classifier(mels, labels, 2, cfg, clf_cfg)


def _accuracy(clf: SpeakerClassifier, items) -> float | None:
    if not items:
        return None
    hits = 0
    for it in items:
        probs = classify_speaker(clf, it.mel)
        pred = REAL if int(np.argmax(probs)) == 0 else FAKE
        hits += int(pred == it.label)
    return 100.0 * hits / len(items)


@dataclass
class ForensicReport:
    overall: float
    breakdown: dict  # {"within_set": {"overall":..,"real":..,"fake":..}, "out_of_set": {...}}
    style_rows: dict = field(default_factory=dict)
    n_items: int = 0

    def to_json(self) -> dict:
        return {
            "overall": self.overall,
            "breakdown": self.breakdown,
            "style_rows": self.style_rows,
            "n_items": self.n_items,
        }

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def eval_forensic(clf: SpeakerClassifier, testset) -> ForensicReport:
    """Accuracy broken out by within/out-of-set and real/fake (Table-2 shape).

    Degenerate subsets (e.g. an all-real testset) report None for the missing
    label row rather than zero.
    """
    items = list(testset)
    if not items:
        raise ForensicsError("empty test set")
    breakdown = {}
    for scope, in_set in (("within_set", True), ("out_of_set", False)):
        subset = [it for it in items if it.in_set == in_set]
        if not subset:
            continue
        breakdown[scope] = {
            "overall": _accuracy(clf, subset),
            "real": _accuracy(clf, [it for it in subset if it.label == REAL]),
            "fake": _accuracy(clf, [it for it in subset if it.label == FAKE]),
            "n": len(subset),
        }
    style_rows = {}
    styles = sorted({it.style_tag for it in items if it.style_tag})
    for tag in styles:
        subset = [it for it in items if it.style_tag == tag]
        style_rows[tag] = {
            "overall": _accuracy(clf, subset),
            "real": _accuracy(clf, [it for it in subset if it.label == REAL]),
            "fake": _accuracy(clf, [it for it in subset if it.label == FAKE]),
            "n": len(subset),
        }
    overall = _accuracy(clf, items)
    return ForensicReport(overall, breakdown, style_rows, len(items))
