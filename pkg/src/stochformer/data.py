"""Corpus index, feature loading, batching and the synthetic interview corpus.

On-disk layout mirrors one folder per participant::

    root/
      index.csv              id,path,pcl_c,split
      300_P/300_AUDIO.wav    (or a precomputed .mfcc file)
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgtext
from .dsp import AudioSignal, FeatureConfig, MfccMatrix, extract_mfcc, read_mfcc, read_wav, write_wav
from .errors import ConfigError, ContractError, DataLoadError
from .rng import RngStream

INDEX_NAME = "index.csv"
INDEX_HEADER = ["id", "path", "pcl_c", "split"]
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CorpusEntry:
    id: str
    path: str
    pcl_c: float
    split: str


@dataclass
class CorpusIndex:
    root: Path
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: CorpusEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def load_corpus(root, index: str = INDEX_NAME) -> CorpusIndex:
    """Parse and validate ``root/index``; every referenced file must exist."""
    root = Path(root)
    index_path = Path(index) if Path(index).is_absolute() else root / index
    try:
        with open(index_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise DataLoadError(f"cannot read index {index_path}: {exc}") from exc
    if header is None:
        return CorpusIndex(root, [])
    if [h.strip() for h in header] != INDEX_HEADER:
        raise DataLoadError(f"{index_path}: header must be {','.join(INDEX_HEADER)}, got {header}")
    corpus = CorpusIndex(root, [])
    seen = set()
    for lineno, row in enumerate(rows, 2):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) != 4:
            raise DataLoadError(f"{index_path}:{lineno}: expected 4 columns, got {len(row)}")
        pid, path, score, split = (cell.strip() for cell in row)
        if pid in seen:
            raise DataLoadError(f"{index_path}:{lineno}: duplicate id {pid}")
        try:
            value = float(score)
        except ValueError:
            raise DataLoadError(f"{index_path}:{lineno}: id {pid} has non-numeric pcl_c {score!r}") from None
        if not math.isfinite(value):
            raise DataLoadError(f"{index_path}:{lineno}: id {pid} has non-finite pcl_c {score!r}")
        entry = CorpusEntry(pid, path, value, split)
        if not corpus.resolve(entry).is_file():
            raise DataLoadError(f"{index_path}:{lineno}: id {pid} references missing file {path}")
        seen.add(pid)
        corpus.entries.append(entry)
    return corpus


def write_index(root, entries) -> Path:
    path = Path(root) / INDEX_NAME
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        for e in entries:
            writer.writerow([e.id, e.path, format(e.pcl_c, ".17g"), e.split])
    return path


def load_matrix(path, features: FeatureConfig) -> MfccMatrix:
    """WAV files are run through the MFCC pipeline; anything else is read as an MFCC text file."""
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return extract_mfcc(read_wav(path), features)
    return read_mfcc(path)


@dataclass
class Corpus:
    index: CorpusIndex
    features: dict  # id -> MfccMatrix

    def split(self, name: str) -> list:
        return self.index.split(name)


def load_features(index: CorpusIndex, features: FeatureConfig | None = None,
                  threads: int = 1) -> Corpus:
    features = features or FeatureConfig()

    def one(entry):
        try:
            return entry.id, load_matrix(index.resolve(entry), features)
        except DataLoadError:
            raise
        except Exception as exc:
            raise DataLoadError(f"id {entry.id} ({entry.path}): {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, index.entries))
    else:
        pairs = [one(e) for e in index.entries]
    return Corpus(index, dict(pairs))


def pad_batch(mats, max_frames: int) -> np.ndarray:
    """Stack matrices, zero-padding to the longest one (capped at ``max_frames``)."""
    longest = min(max(m.frames for m in mats), max_frames)
    out = np.zeros((len(mats), longest, mats[0].coeffs))
    for i, m in enumerate(mats):
        n = min(m.frames, longest)
        out[i, :n] = m.values[:n]
    return out


def batch_iterator(corpus: Corpus, split: str, batch_size: int, seed: int, epoch: int = 0,
                   max_frames: int = 128, shuffle: bool = True, drop_last: bool = True):
    """Yield ``(batch x frames x coeffs array, scores)``.

    The shuffle is keyed by ``(seed, epoch)`` so every epoch has its own but
    reproducible order. An incomplete final batch is dropped unless
    ``drop_last`` is false.
    """
    entries = corpus.split(split)
    if not entries:
        raise ContractError(f"split {split!r} is empty")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(entries))
    if shuffle:
        order = RngStream(seed).fork("shuffle").fork(epoch).permutation(len(entries))
    for start in range(0, len(order), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        if drop_last and len(chunk) < batch_size:
            break
        mats = [corpus.features[e.id] for e in chunk]
        yield pad_batch(mats, max_frames), np.array([e.pcl_c for e in chunk])


# -- synthetic corpus -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_participants: int = 64
    duration_s: float = 1.0
    sample_rate: int = 16000
    score_lo: float = 17.0
    score_hi: float = 85.0
    noise_db: float = -30.0
    train_frac: float = 0.7
    val_frac: float = 0.15
    first_id: int = 300
    seed: int = 42

    def __post_init__(self):
        if self.n_participants < 0:
            raise ConfigError("n_participants must be >= 0")
        if not self.score_lo < self.score_hi:
            raise ConfigError(f"need score_lo < score_hi, got [{self.score_lo}, {self.score_hi}]")
        if not (0 <= self.train_frac and 0 <= self.val_frac and self.train_frac + self.val_frac <= 1):
            raise ConfigError("split fractions must be non-negative and sum to at most 1")

    def to_text(self) -> str:
        return "\n".join(cfgtext.to_lines(self)) + "\n"


def tone_parameters(score: float, spec: SyntheticSpec) -> tuple[float, float, float]:
    """(low tone Hz, high tone Hz, amplitude-modulation Hz), each increasing with the score."""
    u = (score - spec.score_lo) / (spec.score_hi - spec.score_lo)
    return 250.0 + 500.0 * u, 1500.0 + 1500.0 * u, 2.0 + 6.0 * u


def synthesize_audio(score: float, spec: SyntheticSpec, rng: RngStream) -> AudioSignal:
    n = int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    f1, f2, fam = tone_parameters(score, spec)
    phase = 2.0 * np.pi * rng.uniform(3)
    gain = 0.4 + 0.4 * rng.uniform()
    tones = np.sin(2 * np.pi * f1 * t + phase[0]) + 0.5 * np.sin(2 * np.pi * f2 * t + phase[1])
    clean = tones * (1.0 + 0.5 * np.sin(2 * np.pi * fam * t + phase[2]))
    clean *= gain / np.max(np.abs(clean))
    noise_std = math.sqrt(np.mean(clean ** 2) * 10.0 ** (spec.noise_db / 10.0))
    noisy = clean + noise_std * rng.normal(n)
    return AudioSignal(np.clip(noisy, -1.0, 1.0), spec.sample_rate)


def assign_splits(n: int, spec: SyntheticSpec) -> list:
    order = RngStream(spec.seed).fork("split").permutation(n)
    n_train = int(round(spec.train_frac * n))
    n_val = min(n - n_train, int(round(spec.val_frac * n)))
    tags = [""] * n
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def generate_synthetic(spec: SyntheticSpec, out_dir) -> CorpusIndex:
    """Write WAV files plus ``index.csv``; byte-identical for a given spec."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        root_rng = RngStream(spec.seed).fork("synthetic")
        score_draws = root_rng.fork("scores").uniform(spec.n_participants)
        tags = assign_splits(spec.n_participants, spec)
        entries = []
        for i in range(spec.n_participants):
            pid = str(spec.first_id + i)
            score = spec.score_lo + (spec.score_hi - spec.score_lo) * float(score_draws[i])
            rel = f"{pid}_P/{pid}_AUDIO.wav"
            (out / f"{pid}_P").mkdir(exist_ok=True)
            write_wav(out / rel, synthesize_audio(score, spec, root_rng.fork(f"audio{pid}")))
            entries.append(CorpusEntry(pid, rel, score, tags[i]))
        write_index(out, entries)
        (out / "synth.cfg").write_text(spec.to_text(), encoding="utf-8")
    except OSError as exc:
        raise DataLoadError(f"cannot write synthetic corpus to {out}: {exc}") from exc
    return CorpusIndex(out, entries)


def ridge_learnability(corpus: Corpus, alpha: float = 1.0, train_frac: float = 0.75):
    """Closed-form ridge regression on frame-averaged MFCCs.

    Returns ``(test_rmse, score_std)`` on a fixed head/tail split of the corpus
    entries; a learnable corpus gives ``test_rmse`` well below ``score_std``.
    """
    entries = corpus.index.entries
    X = np.array([corpus.features[e.id].values.mean(axis=0) for e in entries])
    y = np.array([e.pcl_c for e in entries])
    n_fit = max(2, int(round(train_frac * len(entries))))
    mu, sd = X[:n_fit].mean(axis=0), X[:n_fit].std(axis=0) + 1e-12
    Z = (X - mu) / sd
    Zb = np.hstack([Z, np.ones((len(Z), 1))])
    reg = alpha * np.eye(Zb.shape[1])
    reg[-1, -1] = 0.0
    w = np.linalg.solve(Zb[:n_fit].T @ Zb[:n_fit] + reg, Zb[:n_fit].T @ y[:n_fit])
    resid = Zb[n_fit:] @ w - y[n_fit:]
    return float(np.sqrt(np.mean(resid ** 2))), float(np.std(y))


def default_threads() -> int:
    return max(1, min(4, os.cpu_count() or 1))
