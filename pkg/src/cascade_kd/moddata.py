"""Seeded synthetic three-modality data (motion vectors, residuals, I-frames).

Each class owns a latent frame sequence. A sample mixes its class sequence
with a random confuser class, adds its own appearance offset and motion
wobble, and then renders three views of the same latent video:

* I-frame: the frame itself plus Gaussian noise (``sigma_i``),
* residual: the consecutive-frame difference plus noise (``sigma_r``),
* motion vector: the block-averaged difference (factor ``block_pool``) plus
  noise (``sigma_mv``).

Each latent video has ``seq_len`` frames with fixed per-frame noise; a
rendering samples frames for each modality independently and concatenates
them. ``render`` selects which frames are sampled, so training can re-sample
clips from the same videos every epoch. All
randomness comes from numpy's Philox counter-based generator keyed by
``SeedSequence([seed, stream])`` so every stream is independent: changing the
number of MV frames leaves the R and I-frame features untouched.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path

import numpy as np

from ._binio import BinaryReader, DataFormatError, check_header


class Modality(str, Enum):
    MV = "mv"
    R = "r"
    IFRAME = "iframe"

    @classmethod
    def parse(cls, value: "str | Modality") -> "Modality":
        if isinstance(value, Modality):
            return value
        aliases = {"mv": cls.MV, "r": cls.R, "res": cls.R, "residual": cls.R, "i": cls.IFRAME, "iframe": cls.IFRAME}
        try:
            return aliases[value.lower()]
        except KeyError:
            raise ValueError(f"unknown modality {value!r}; expected one of mv, r, iframe") from None


MODALITIES = (Modality.MV, Modality.R, Modality.IFRAME)

# stream ids for SeedSequence([seed, stream])
_TEMPLATES, _LATENT, _MV, _R, _IFRAME, _SPLITS = range(6)
_PICKS = 100


@dataclass(frozen=True)
class GenSpec:
    seed: int = 0
    num_classes: int = 10
    samples_per_class: int = 60
    dim_mv: int = 16
    dim_r: int = 64
    dim_i: int = 64
    sigma_mv: float = 0.9
    sigma_r: float = 0.5
    sigma_i: float = 0.25
    block_pool: int = 4
    frames_mv: int = 3
    frames_r: int = 3
    frames_i: int = 3
    # latent video model
    seq_len: int = 16
    template_scale: float = 0.5
    drift_scale: float = 0.5
    motion_scale: float = 0.4
    appearance_jitter: float = 2.0
    sample_motion: float = 0.8
    mix_max: float = 0.4

    def validate(self) -> None:
        problems = []
        if not 0 <= self.seed < 2**64:
            problems.append("seed must fit in u64")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.samples_per_class < 1:
            problems.append("samples_per_class must be >= 1")
        if not self.sigma_mv > self.sigma_r > self.sigma_i > 0:
            problems.append("noise must satisfy sigma_mv > sigma_r > sigma_i > 0")
        if self.block_pool < 1 or self.dim_i % self.block_pool:
            problems.append("block_pool must divide dim_i")
        elif self.dim_mv != self.dim_i // self.block_pool:
            problems.append(f"dim_mv must equal dim_i / block_pool = {self.dim_i // self.block_pool}")
        if self.dim_r != self.dim_i:
            problems.append("dim_r must equal dim_i (residuals are frame differences)")
        for name in ("frames_mv", "frames_r", "frames_i"):
            n = getattr(self, name)
            limit = self.seq_len if name == "frames_i" else self.seq_len - 1
            if not 1 <= n <= limit:
                problems.append(f"{name}={n} outside supported range [1, {limit}] for seq_len={self.seq_len}")
        if not 0 <= self.mix_max < 0.5:
            problems.append("mix_max must lie in [0, 0.5) so the true class dominates")
        for name in ("template_scale", "drift_scale", "motion_scale", "appearance_jitter", "sample_motion"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if problems:
            raise ValueError("invalid GenSpec: " + "; ".join(problems))

    def input_dim(self, modality: Modality) -> int:
        modality = Modality.parse(modality)
        if modality is Modality.MV:
            return self.frames_mv * self.dim_mv
        if modality is Modality.R:
            return self.frames_r * self.dim_r
        return self.frames_i * self.dim_i

    def frames(self, modality: Modality) -> int:
        return {Modality.MV: self.frames_mv, Modality.R: self.frames_r, Modality.IFRAME: self.frames_i}[Modality.parse(modality)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ModalitySample:
    mv: np.ndarray
    r: np.ndarray
    iframe: np.ndarray
    label: int


@dataclass
class ModalityDataset:
    """Column-major storage of ``ModalitySample`` records."""

    spec: GenSpec
    mv: np.ndarray
    r: np.ndarray
    iframe: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, i: int) -> ModalitySample:
        return ModalitySample(self.mv[i], self.r[i], self.iframe[i], int(self.labels[i]))

    def features(self, modality: Modality) -> np.ndarray:
        return getattr(self, Modality.parse(modality).value)

    def subset(self, idx: np.ndarray) -> "ModalityDataset":
        idx = np.asarray(idx)
        return ModalityDataset(self.spec, self.mv[idx], self.r[idx], self.iframe[idx], self.labels[idx])

    def equals(self, other: "ModalityDataset") -> bool:
        return (
            self.spec == other.spec
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in ("mv", "r", "iframe", "labels"))
        )


def _stream(seed: int, stream: int, render: int = 0) -> np.random.Generator:
    key = [seed, stream] if render == 0 else [seed, stream, render]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _templates(spec: GenSpec) -> np.ndarray:
    rng = _stream(spec.seed, _TEMPLATES)
    k, D, pool, S = spec.num_classes, spec.dim_i, spec.block_pool, spec.seq_len
    base = spec.template_scale * rng.standard_normal((k, D))
    # motion is coarse: one drift value per block
    drift = np.repeat(spec.drift_scale * rng.standard_normal((k, D // pool)), pool, axis=1)
    steps = spec.motion_scale * rng.standard_normal((k, S - 1, D))
    seq = np.empty((k, S, D))
    seq[:, 0] = base
    for t in range(S - 1):
        seq[:, t + 1] = seq[:, t] + drift + steps[:, t]
    return seq


@dataclass
class VideoBank:
    """Latent per-video frame stacks from which datasets are rendered.

    ``iframe`` is ``(n, seq_len, dim_i)``, ``r`` and ``mv`` hold the
    ``seq_len - 1`` consecutive-frame views.
    """

    spec: GenSpec
    iframe: np.ndarray
    r: np.ndarray
    mv: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def build_videos(spec: GenSpec) -> VideoBank:
    spec.validate()
    k, D, pool, S = spec.num_classes, spec.dim_i, spec.block_pool, spec.seq_len
    templates = _templates(spec)
    lat = _stream(spec.seed, _LATENT)
    # sensor noise belongs to the video: one draw per frame
    noise = {s: _stream(spec.seed, s) for s in (_MV, _R, _IFRAME)}
    n = k * spec.samples_per_class
    labels = np.repeat(np.arange(k, dtype=np.int64), spec.samples_per_class)
    iframe = np.empty((n, S, D))
    r = np.empty((n, S - 1, D))
    mv = np.empty((n, S - 1, D // pool))
    for s, c in enumerate(labels):
        confuser = (c + 1 + lat.integers(k - 1)) % k
        lam = lat.uniform(0.0, spec.mix_max)
        seq = (1.0 - lam) * templates[c] + lam * templates[confuser]
        seq = seq + spec.appearance_jitter * lat.standard_normal(D)
        wobble = np.zeros((S, D))
        wobble[1:] = np.cumsum(spec.sample_motion * lat.standard_normal((S - 1, D)), axis=0)
        seq = seq + wobble
        diff = seq[1:] - seq[:-1]
        iframe[s] = seq + spec.sigma_i * noise[_IFRAME].standard_normal((S, D))
        r[s] = diff + spec.sigma_r * noise[_R].standard_normal((S - 1, D))
        coarse = diff.reshape(S - 1, D // pool, pool).mean(axis=-1)
        mv[s] = coarse + spec.sigma_mv * noise[_MV].standard_normal((S - 1, D // pool))
    return VideoBank(spec, iframe, r, mv, labels)


def _pick(rng: np.random.Generator, frames: np.ndarray, count: int) -> np.ndarray:
    # `count` distinct frames per video, kept in temporal order
    n, available = frames.shape[:2]
    idx = np.sort(np.argsort(rng.random((n, available)), axis=1)[:, :count], axis=1)
    return frames[np.arange(n)[:, None], idx].reshape(n, -1)


def render(bank: VideoBank, render: int = 0) -> ModalityDataset:
    """Sample frames from every video; each modality uses its own pick stream."""
    spec = bank.spec
    picks = {s: _stream(spec.seed, _PICKS + s, render) for s in (_MV, _R, _IFRAME)}
    return ModalityDataset(
        spec,
        _pick(picks[_MV], bank.mv, spec.frames_mv),
        _pick(picks[_R], bank.r, spec.frames_r),
        _pick(picks[_IFRAME], bank.iframe, spec.frames_i),
        bank.labels.copy(),
    )


def generate(spec: GenSpec, render_index: int = 0) -> ModalityDataset:
    """Deterministic dataset of ``num_classes * samples_per_class`` samples, class-major order.

    ``render_index`` re-samples frame positions of the same latent videos;
    render 0 is the canonical dataset.
    """
    return render(build_videos(spec), render_index)


class EpochRenders:
    """Per-epoch re-rendered training views (fresh frame picks, same videos).

    Epoch ``e`` sees render ``e + 1`` restricted to ``indices``; render 0 is
    reserved for the canonical dataset used for evaluation.
    """

    def __init__(self, bank: VideoBank, indices: np.ndarray):
        self.bank = bank
        self.indices = np.asarray(indices)
        self._cache: tuple[int, ModalityDataset] | None = None

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> np.ndarray:
        return self.bank.labels[self.indices]

    def epoch(self, e: int) -> ModalityDataset:
        if self._cache is None or self._cache[0] != e:
            self._cache = (e, render(self.bank, e + 1).subset(self.indices))
        return self._cache[1]


@dataclass(frozen=True)
class DatasetSplit:
    split_id: int
    train: np.ndarray
    test: np.ndarray


def make_splits(n: int, seed: int) -> list[DatasetSplit]:
    """Three 75/25 train/test partitions with pairwise-disjoint test sets.

    One seeded shuffle is cut into four folds; split ``s`` tests on fold ``s``.
    """
    if n < 10:
        raise ValueError(f"need at least 10 samples to split, got {n}")
    perm = _stream(seed, _SPLITS).permutation(n)
    folds = np.array_split(perm, 4)
    splits = []
    for s in range(3):
        test = np.sort(folds[s])
        train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != s]))
        splits.append(DatasetSplit(s + 1, train, test))
    return splits


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray) -> float:
    classes = np.unique(train_y)
    centroids = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == test_y).mean())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MAGIC = b"CVKD"
FORMAT_VERSION = 1


def save_dataset(ds: ModalityDataset, path: str | Path) -> None:
    spec_blob = json.dumps(ds.spec.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(spec_blob)))
        fh.write(spec_blob)
        fh.write(struct.pack("<Q", len(ds)))
        fh.write(ds.labels.astype("<i8").tobytes())
        for arr in (ds.mv, ds.r, ds.iframe):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> ModalityDataset:
    r = BinaryReader(Path(path).read_bytes(), f"dataset file {path}")
    check_header(r, MAGIC, FORMAT_VERSION)
    spec_len = r.unpack("<I", "spec length")
    try:
        spec = GenSpec.from_dict(json.loads(r.take(spec_len, "spec").decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise DataFormatError(f"corrupt GenSpec block: {exc}") from None
    n = r.unpack("<Q", "sample count")
    labels = np.frombuffer(r.take(8 * n, "labels"), dtype="<i8").astype(np.int64)
    arrays = []
    for modality in MODALITIES:
        d = spec.input_dim(modality)
        raw = r.take(8 * n * d, f"{modality.value} features")
        arrays.append(np.frombuffer(raw, dtype="<f8").reshape(n, d).astype(np.float64))
    r.finish()
    return ModalityDataset(spec, arrays[0], arrays[1], arrays[2], labels)
