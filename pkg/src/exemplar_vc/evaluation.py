"""Objective metrics and verification harnesses: mel-cepstral distortion with
DTW alignment, speaker-classification accuracy, the reprojection-property
table, cross-speaker word clustering, the PCA/linear-autoencoder oracle, and
video MSE/PSNR.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.fft
import torch

from . import signal as sig
from .convert import convert_mel
from .model import ExemplarModel, SpeakerClassifier, classify_speaker
from .signal import AudioClip, MelSpectrogram, SignalConfig

MCD_CONST = (10.0 / np.log(10.0)) * np.sqrt(2.0)
PSNR_CAP = 99.0
N_CEPSTRA = 24


class EvalError(Exception):
    pass


class AlignmentError(EvalError):
    """Utterance pair too dissimilar in length to align."""


# --- mel cepstra and MCD ----------------------------------------------------


def mel_cepstra(clip: AudioClip, cfg: SignalConfig) -> np.ndarray:
    """Per-frame mel cepstra c1..c24 (DCT-II of log mel energies, c0 dropped)."""
    magnitude = sig.stft_magnitude(clip.samples, cfg)
    mel_linear = sig.mel_filterbank(cfg) @ magnitude
    log_mel = np.log(np.maximum(mel_linear, sig.LOG_FLOOR))
    ceps = scipy.fft.dct(log_mel, type=2, axis=0, norm="ortho")
    return ceps[1 : N_CEPSTRA + 1]


def dtw_path(x: np.ndarray, y: np.ndarray) -> list[tuple[int, int]]:
    """Classic DTW alignment path between (d, N) and (d, M) feature matrices.

    Symmetric step pattern (diagonal preferred on ties), Euclidean local cost.
    """
    n, m = x.shape[1], y.shape[1]
    cost = np.linalg.norm(x[:, :, None] - y[:, None, :], axis=0)
    acc = np.full((n, m), np.inf)
    move = np.zeros((n, m), dtype=np.int8)  # 0 diag, 1 up, 2 left
    acc[0, 0] = cost[0, 0]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        move[i, 0] = 1
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
        move[0, j] = 2
    for i in range(1, n):
        prev_row = acc[i - 1]
        row = acc[i]
        for j in range(1, m):
            best = prev_row[j - 1]
            step = 0
            if prev_row[j] < best:
                best = prev_row[j]
                step = 1
            if row[j - 1] < best:
                best = row[j - 1]
                step = 2
            row[j] = cost[i, j] + best
            move[i, j] = step
    path = [(n - 1, m - 1)]
    while path[-1] != (0, 0):
        i, j = path[-1]
        step = move[i, j]
        if step == 0:
            path.append((i - 1, j - 1))
        elif step == 1:
            path.append((i - 1, j))
        else:
            path.append((i, j - 1))
    return path[::-1]


def mcd(reference: AudioClip, synthesized: AudioClip, cfg: SignalConfig | None = None,
        align: bool = True) -> float:
    """Mel-cepstral distortion between two utterances (lower = closer content).

    Frames are aligned by DTW on the cepstra; with align=False frames pair up
    directly (truncated to the shorter utterance).
    """
    cfg = cfg or SignalConfig()
    if len(reference) == 0 or len(synthesized) == 0:
        raise EvalError("cannot compute MCD on an empty clip")
    ref = mel_cepstra(reference, cfg)
    syn = mel_cepstra(synthesized, cfg)
    ratio = max(ref.shape[1], syn.shape[1]) / min(ref.shape[1], syn.shape[1])
    if ratio > 4.0:
        raise AlignmentError(
            f"length ratio {ratio:.1f} exceeds 4; utterances are not alignable"
        )
    if align:
        pairs = dtw_path(ref, syn)
    else:
        t = min(ref.shape[1], syn.shape[1])
        pairs = [(i, i) for i in range(t)]
    deltas = np.stack([ref[:, i] - syn[:, j] for i, j in pairs])
    return float(MCD_CONST * np.mean(np.linalg.norm(deltas, axis=1)))


# --- speaker classification accuracy ----------------------------------------


def sca(conversions, classifier: SpeakerClassifier, labels) -> float:
    """Percent of conversions whose classifier argmax equals the target id."""
    labels = list(labels)
    if not conversions:
        raise EvalError("no conversions to score")
    hits = 0
    for mel, target in conversions:
        if target not in labels:
            raise EvalError(f"target '{target}' not enrolled in classifier")
        probs = classify_speaker(classifier, mel)
        hits += int(np.argmax(probs) == labels.index(target))
    return 100.0 * hits / len(conversions)


# --- reprojection verification (word table) ----------------------------------


def _padded_l2(a: np.ndarray, b: np.ndarray) -> float:
    """L2 on compressed mels zero-padded to the longer frame count."""
    t = max(a.shape[1], b.shape[1])
    pa = np.pad(a, ((0, 0), (0, t - a.shape[1])))
    pb = np.pad(b, ((0, 0), (0, t - b.shape[1])))
    return float(np.linalg.norm(pa - pb))


@dataclass
class ReprojectionRow:
    word: str
    d_conv: float
    d_min: float
    d_mean: float
    argmin_word: str
    likelihood: float  # percent

    def __post_init__(self):
        if self.d_min > self.d_mean + 1e-9:
            raise EvalError(f"row '{self.word}': d_min exceeds d_mean")


@dataclass
class ReprojectionReport:
    rows: list  # one per probe utterance
    word_rows: list  # per-word averages, Table-3 shaped
    avg_d_conv: float
    avg_d_min: float
    avg_d_mean: float
    argmin_accuracy: float
    mean_likelihood: float

    def to_json(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "word_rows": [asdict(r) for r in self.word_rows],
            "avg_d_conv": self.avg_d_conv,
            "avg_d_min": self.avg_d_min,
            "avg_d_mean": self.avg_d_mean,
            "argmin_accuracy": self.argmin_accuracy,
            "mean_likelihood": self.mean_likelihood,
        }

    def to_table(self) -> str:
        """Aligned text table: word, d_conv, d_min, d_mean, argmin, likelihood."""
        header = ("word", "d_conv", "d_min", "d_mean", "argmin", "likelihood(%)")
        body = [
            (r.word, f"{r.d_conv:.2f}", f"{r.d_min:.2f}", f"{r.d_mean:.2f}",
             r.argmin_word, f"{r.likelihood:.1f}")
            for r in self.word_rows
        ]
        body.append(
            ("average", f"{self.avg_d_conv:.2f}", f"{self.avg_d_min:.2f}",
             f"{self.avg_d_mean:.2f}", "", f"{self.mean_likelihood:.1f}")
        )
        widths = [max(len(header[c]), *(len(row[c]) for row in body)) for c in range(6)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        for row in body:
            lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
        return "\n".join(lines)


def verify_reprojection(
    model_a: ExemplarModel,
    words_a,
    words_b,
    classifier: SpeakerClassifier,
    labels,
    target_label: str,
) -> ReprojectionReport:
    """Convert each labeled B utterance through A's model and tabulate the
    distances of the output to A's manifold samples per word (Table-3 layout).

    words_a / words_b: iterables of (word, MelSpectrogram).
    """
    words_a = [(w, m) for w, m in words_a]
    words_b = [(w, m) for w, m in words_b]
    if not words_a or not words_b:
        raise EvalError("need labeled utterances for both speakers")
    shared = {w for w, _ in words_a} & {w for w, _ in words_b}
    if not shared:
        raise EvalError("speakers share no vocabulary")
    labels = list(labels)
    target_idx = labels.index(target_label)

    rows = []
    for word, mel_b in words_b:
        if word not in shared:
            continue
        converted, _ = convert_mel(model_a, mel_b)
        d_conv = _padded_l2(converted.values, mel_b.values)
        per_word: dict = {}
        all_d = []
        for wa, mel_a in words_a:
            d = _padded_l2(mel_a.values, mel_b.values)
            all_d.append(d)
            per_word[wa] = min(d, per_word.get(wa, np.inf))
        d_min = float(min(all_d))
        d_mean = float(np.mean(all_d))
        argmin_word = min(per_word, key=per_word.get)
        probs = classify_speaker(classifier, converted)
        rows.append(
            ReprojectionRow(
                word=word,
                d_conv=d_conv,
                d_min=d_min,
                d_mean=d_mean,
                argmin_word=argmin_word,
                likelihood=100.0 * float(probs[target_idx]),
            )
        )

    word_rows = []
    for word in sorted({r.word for r in rows}):
        sub = [r for r in rows if r.word == word]
        argmins = [r.argmin_word for r in sub]
        modal = max(sorted(set(argmins)), key=argmins.count)
        word_rows.append(
            ReprojectionRow(
                word=word,
                d_conv=float(np.mean([r.d_conv for r in sub])),
                d_min=float(np.mean([r.d_min for r in sub])),
                d_mean=float(np.mean([r.d_mean for r in sub])),
                argmin_word=modal,
                likelihood=float(np.mean([r.likelihood for r in sub])),
            )
        )
    return ReprojectionReport(
        rows=rows,
        word_rows=word_rows,
        avg_d_conv=float(np.mean([r.d_conv for r in rows])),
        avg_d_min=float(np.mean([r.d_min for r in rows])),
        avg_d_mean=float(np.mean([r.d_mean for r in rows])),
        argmin_accuracy=float(np.mean([r.argmin_word == r.word for r in rows])),
        mean_likelihood=float(np.mean([r.likelihood for r in rows])),
    )


# --- word clustering ----------------------------------------------------------


@dataclass
class WordClusterResult:
    distances: np.ndarray
    purity: float
    words: list
    speakers: list

    def to_json(self) -> dict:
        return {
            "purity": self.purity,
            "n_items": len(self.words),
            "words": self.words,
            "speakers": self.speakers,
        }


def word_cluster_analysis(items) -> WordClusterResult:
    """Nearest-cross-speaker-neighbour purity over labeled word mels.

    items: iterable of (word, speaker, MelSpectrogram). Purity is the share
    of items whose closest item from any *other* speaker carries the same
    word label.
    """
    items = list(items)
    words = [w for w, _, _ in items]
    speakers = [s for _, s, _ in items]
    if len(set(words)) < 1 or len(set(speakers)) < 2:
        raise EvalError("need >= 2 speakers with labeled words")
    n = len(items)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = _padded_l2(items[i][2].values, items[j][2].values)
            dist[i, j] = dist[j, i] = d
    hits = 0
    for i in range(n):
        cross = [j for j in range(n) if speakers[j] != speakers[i]]
        j = min(cross, key=lambda j: dist[i, j])
        hits += int(words[j] == words[i])
    return WordClusterResult(dist, hits / n, words, speakers)


# --- PCA vs linear autoencoder oracle ----------------------------------------


@dataclass
class LinearOracleResult:
    pca_reconstruction: np.ndarray
    ae_reconstruction: np.ndarray
    pca_residual: float
    ae_residual: float
    relative_gap: float  # ||ae - pca|| / ||pca||


def _flatten(mel) -> np.ndarray:
    if isinstance(mel, MelSpectrogram):
        return mel.values.astype(np.float64).ravel()
    return np.asarray(mel, dtype=np.float64).ravel()


def _train_linear_ae(data: np.ndarray, k: int, adam_steps: int, seed: int):
    """Gradient-train an untied linear autoencoder to (near) optimality.

    Encoder rows start as a random orthonormal basis drawn *inside the data
    span*, so directions the training loss cannot see stay exactly zero and
    never contaminate out-of-sample probes. Adam sorts the subspace out of
    saddle regions, then L-BFGS polishes to the flat optimum.
    """
    torch.manual_seed(seed)
    x = torch.from_numpy(data)
    mean = x.mean(dim=0)
    centered = x - mean
    mix = torch.randn(k, data.shape[0], dtype=torch.float64)
    q, _ = torch.linalg.qr((mix @ centered).T)
    w_enc = q.T.contiguous().clone().requires_grad_(True)
    w_dec = q.contiguous().clone().requires_grad_(True)
    b_enc = torch.zeros(k, dtype=torch.float64, requires_grad=True)
    b_dec = mean.clone().requires_grad_(True)
    params = [w_enc, w_dec, b_enc, b_dec]

    opt = torch.optim.Adam(params, lr=3e-3)
    for _ in range(adam_steps):
        opt.zero_grad()
        rec = (x @ w_enc.T + b_enc) @ w_dec.T + b_dec
        ((rec - x) ** 2).mean().backward()
        opt.step()
    lbfgs = torch.optim.LBFGS(
        params, lr=0.8, max_iter=40, history_size=20,
        tolerance_grad=1e-14, tolerance_change=1e-16,
    )

    def closure():
        lbfgs.zero_grad()
        loss = (((x @ w_enc.T + b_enc) @ w_dec.T + b_dec - x) ** 2).mean()
        loss.backward()
        return loss

    for _ in range(15):
        lbfgs.step(closure)
    return [p.detach() for p in params]


def linear_projection_oracles(
    train_mels,
    probe_mels,
    bottleneck_dim: int,
    ae_steps: int = 3000,
    seed: int = 0,
) -> list:
    """Compare closed-form PCA projections against a gradient-trained linear
    autoencoder with the same bottleneck, for many probes at once.

    PCA is the optimality oracle: its subspace minimizes training
    reconstruction error, and at convergence the autoencoder's probe
    residuals can undercut PCA's only by training tolerance.
    """
    data = np.stack([_flatten(m) for m in train_mels])
    if data.shape[0] < bottleneck_dim:
        raise EvalError("need at least bottleneck_dim training vectors")
    probes = [_flatten(p) for p in probe_mels]
    mean = data.mean(axis=0)
    centered = data - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:bottleneck_dim]  # (k, d)

    w_enc, w_dec, b_enc, b_dec = _train_linear_ae(data, bottleneck_dim, ae_steps, seed)

    results = []
    for probe in probes:
        pca_rec = mean + basis.T @ (basis @ (probe - mean))
        with torch.no_grad():
            p = torch.from_numpy(probe)
            ae_rec = ((p @ w_enc.T + b_enc) @ w_dec.T + b_dec).numpy()
        pca_res = float(np.linalg.norm(probe - pca_rec))
        ae_res = float(np.linalg.norm(probe - ae_rec))
        gap = float(
            np.linalg.norm(ae_rec - pca_rec) / max(np.linalg.norm(pca_rec), 1e-12)
        )
        results.append(LinearOracleResult(pca_rec, ae_rec, pca_res, ae_res, gap))
    return results


def linear_projection_oracle(
    train_mels,
    probe_mel,
    bottleneck_dim: int,
    ae_steps: int = 3000,
    seed: int = 0,
) -> LinearOracleResult:
    """Single-probe form of `linear_projection_oracles`."""
    return linear_projection_oracles(
        train_mels, [probe_mel], bottleneck_dim, ae_steps=ae_steps, seed=seed
    )[0]


# --- video metrics -------------------------------------------------------------


def video_metrics(generated: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    """(MSE, PSNR) over the 8-bit pixel scale. Identical inputs cap at 99 dB."""
    generated = np.asarray(generated)
    reference = np.asarray(reference)
    if generated.shape != reference.shape:
        raise EvalError(
            f"frame shape mismatch: {generated.shape} vs {reference.shape}"
        )
    if generated.dtype != np.uint8:
        generated = np.asarray(generated, dtype=np.float64) * 255.0
    if reference.dtype != np.uint8:
        reference = np.asarray(reference, dtype=np.float64) * 255.0
    mse = float(np.mean((generated.astype(np.float64) - reference.astype(np.float64)) ** 2))
    if mse == 0.0:
        return 0.0, PSNR_CAP
    psnr = float(min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP))
    return mse, psnr


@dataclass
class MetricReport:
    mcd: float | None = None
    sca: float | None = None
    video_mse: float | None = None
    video_psnr: float | None = None

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = {k: v for k, v in asdict(self).items() if v is not None}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")
