"""Frame sequences: synthetic generation, on-disk format and cross-validation folds.

On-disk layout of a dataset directory::

    mapping.txt      one "<class id> <token>" per line
    <id>.feat        b"G2LFT1", u32 F, u32 T, then T*F little-endian float32,
                     one F-vector per frame
    <id>.txt         one label token per frame
    folds.json       optional, persisted fold splits
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DatasetError

FEATURE_MAGIC = b"G2LFT1"


@dataclass
class FrameSequence:
    """Features ``(F, T)`` and integer labels ``(T,)`` of one video."""

    features: np.ndarray
    labels: np.ndarray
    id: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DatasetError(f"{self.id}: features must be (F, T) and labels (T,)")
        if self.features.shape[1] != self.labels.size:
            raise DatasetError(f"{self.id}: {self.features.shape[1]} feature frames "
                               f"but {self.labels.size} labels")
        if self.labels.size < 1:
            raise DatasetError(f"{self.id}: empty sequence")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError(f"{self.id}: non-finite features")
        if self.labels.min() < 0:
            raise DatasetError(f"{self.id}: negative label")

    def __len__(self):
        return self.labels.size


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SynthTaskConfig:
    """Knobs of the synthetic segmentation task.

    Labels follow a Markov chain over classes that usually steps to the next
    class in a fixed cycle (``order_strength``).  Frame features are a class
    prototype plus Gaussian noise.  With probability ``long_range`` a segment
    hides its prototype behind one shared by a pair of classes; the pair is
    then only told apart by a weak sign-coded bump that spans the whole
    segment, which rewards large receptive fields.  ``drift_amplitude=0``
    turns the bump off and with it the hiding.
    """

    num_classes: int = 6
    num_videos: int = 40
    length_range: tuple[int, int] = (400, 600)
    feature_dim: int = 12
    mean_segment_length: float | Sequence[float] = 60.0
    segment_dist: str = "geometric"
    noise: float = 1.5
    long_range: float = 0.5
    drift_amplitude: float = 1.0
    order_strength: float = 0.8
    prototype_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(int(v) for v in self.length_range)
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.num_videos < 1:
            raise ConfigError("need at least one video")
        t_min, t_max = self.length_range
        if t_min < 10 or t_max < t_min:
            raise ConfigError(f"invalid length range {self.length_range}; minimum length is 10")
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")
        if not 0.0 <= self.long_range <= 1.0 or not 0.0 <= self.order_strength <= 1.0:
            raise ConfigError("long_range and order_strength are probabilities")
        if self.segment_dist not in ("geometric", "uniform"):
            raise ConfigError(f"unknown segment length distribution {self.segment_dist!r}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        means = np.broadcast_to(np.asarray(self.mean_segment_length, dtype=float), (self.num_classes,))
        if np.any(means < 1):
            raise ConfigError("mean segment length must be >= 1")

    def segment_means(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mean_segment_length, dtype=float),
                               (self.num_classes,)).copy()


def _segment_length(rng, mean: float, dist: str) -> int:
    if dist == "geometric":
        return int(rng.geometric(1.0 / mean))
    lo = max(1, int(round(mean / 2)))
    return int(rng.integers(lo, 2 * int(round(mean)) - lo + 1))


def synthetic_labels(cfg: SynthTaskConfig, rng: np.random.Generator, length: int):
    """Label runs for one video as ``(label, length)`` pairs covering ``length`` frames."""
    K = cfg.num_classes
    means = cfg.segment_means()
    runs = []
    c = int(rng.integers(K))
    total = 0
    while total < length:
        n = min(_segment_length(rng, means[c], cfg.segment_dist), length - total)
        runs.append((c, n))
        total += n
        if rng.random() < cfg.order_strength:
            c = (c + 1) % K
        else:
            c = int((c + rng.integers(1, K)) % K)
    return runs


def generate_synthetic(cfg: SynthTaskConfig) -> list[FrameSequence]:
    """Deterministic synthetic dataset; features are exactly float32-representable."""
    rng = np.random.default_rng(cfg.seed)
    K, F = cfg.num_classes, cfg.feature_dim
    protos = rng.normal(size=(K, F))
    protos *= cfg.prototype_scale / np.linalg.norm(protos, axis=1, keepdims=True)
    partner = np.arange(K) ^ 1
    partner[partner >= K] = np.arange(K)[partner >= K]
    shared = 0.5 * (protos + protos[partner])
    drift_dir = rng.normal(size=(K, F))
    # one direction per pair, the two members differ in sign
    pair_id = np.minimum(np.arange(K), partner)
    drift_dir = drift_dir[pair_id]
    drift_dir /= np.linalg.norm(drift_dir, axis=1, keepdims=True)
    sign = np.where(np.arange(K) <= partner, 1.0, -1.0)

    videos = []
    t_min, t_max = cfg.length_range
    for v in range(cfg.num_videos):
        T = int(rng.integers(t_min, t_max + 1))
        runs = synthetic_labels(cfg, rng, T)
        labels = np.repeat([c for c, _ in runs], [n for _, n in runs])
        feats = np.empty((T, F))
        pos = 0
        for c, n in runs:
            # without the drift there is nothing left to tell a hidden pair apart
            hidden = (partner[c] != c and rng.random() < cfg.long_range
                      and cfg.drift_amplitude > 0)
            base = shared[c] if hidden else protos[c]
            bump = np.sin(np.pi * (np.arange(n) + 0.5) / n)
            feats[pos:pos + n] = base + (sign[c] * cfg.drift_amplitude * bump)[:, None] * drift_dir[c]
            pos += n
        feats += cfg.noise * rng.normal(size=feats.shape)
        feats = feats.astype(np.float32).astype(np.float64)
        videos.append(FrameSequence(feats.T.copy(), labels, f"video_{v:03d}"))
    return videos


# ---------------------------------------------------------------------------
# disk format


def default_mapping(num_classes: int) -> dict[int, str]:
    return {i: f"action_{i}" for i in range(num_classes)}


def write_feature_file(path, features: np.ndarray) -> None:
    F, T = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", F, T))
        fh.write(np.ascontiguousarray(features.T, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read feature file ({exc.strerror})") from exc
    head = len(FEATURE_MAGIC) + 8
    if len(blob) < head or not blob.startswith(FEATURE_MAGIC):
        raise DatasetError(f"{path}: not a G2LFT1 feature file")
    F, T = struct.unpack("<II", blob[len(FEATURE_MAGIC):head])
    if len(blob) != head + 4 * F * T:
        raise DatasetError(f"{path}: expected {F}x{T} float32 values, file size disagrees")
    data = np.frombuffer(blob, dtype="<f4", offset=head).reshape(T, F)
    return data.T.astype(np.float64)


def save_dataset(root, sequences: Sequence[FrameSequence], mapping: dict[int, str] | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if mapping is None:
        mapping = default_mapping(1 + max(int(s.labels.max()) for s in sequences))
    with open(root / "mapping.txt", "w") as fh:
        for i in sorted(mapping):
            fh.write(f"{i} {mapping[i]}\n")
    for seq in sequences:
        write_feature_file(root / f"{seq.id}.feat", seq.features)
        with open(root / f"{seq.id}.txt", "w") as fh:
            fh.write("".join(f"{mapping[int(c)]}\n" for c in seq.labels))


def read_mapping(path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: mapping file missing")
    mapping = {}
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or not parts[0].isdigit():
            raise DatasetError(f"{path}:{n}: expected '<id> <token>'")
        mapping[parts[1]] = int(parts[0])
    return mapping


def load_dataset(root) -> list[FrameSequence]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset directory does not exist")
    mapping = read_mapping(root / "mapping.txt")
    out = []
    for feat_path in sorted(root.glob("*.feat")):
        label_path = feat_path.with_suffix(".txt")
        if not label_path.exists():
            raise DatasetError(f"{label_path}: label file missing")
        features = read_feature_file(feat_path)
        tokens = label_path.read_text().split()
        for n, tok in enumerate(tokens, start=1):
            if tok not in mapping:
                raise DatasetError(f"{label_path}:{n}: unknown label {tok!r}")
        if len(tokens) != features.shape[1]:
            raise DatasetError(f"{label_path}: {len(tokens)} labels but {features.shape[1]} "
                               f"frames in {feat_path.name}")
        out.append(FrameSequence(features, np.array([mapping[t] for t in tokens]), feat_path.stem))
    if not out:
        raise DatasetError(f"{root}: no .feat files found")
    return out


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    index: int
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)


def make_folds(ids: Sequence[str], num_folds: int = 4, seed: int = 0) -> list[FoldSplit]:
    """Seeded shuffle, then ``num_folds`` contiguous validation blocks."""
    ids = list(ids)
    if num_folds < 2:
        raise ConfigError("need at least 2 folds")
    if len(ids) < num_folds:
        raise ConfigError(f"{len(ids)} ids cannot fill {num_folds} folds")
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    blocks = np.array_split(order, num_folds)
    folds = []
    for i, block in enumerate(blocks):
        val = set(block.tolist())
        folds.append(FoldSplit(i, [ids[j] for j in order if j not in val], [ids[j] for j in block]))
    return folds


def split_sequences(sequences: Sequence[FrameSequence], fold: FoldSplit):
    by_id = {s.id: s for s in sequences}
    try:
        return [by_id[i] for i in fold.train_ids], [by_id[i] for i in fold.val_ids]
    except KeyError as exc:
        raise DatasetError(f"fold {fold.index} refers to unknown sequence {exc.args[0]!r}") from None


def save_folds(path, folds: Sequence[FoldSplit]) -> None:
    payload = [{"index": f.index, "train": f.train_ids, "val": f.val_ids} for f in folds]
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_folds(path) -> list[FoldSplit]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: folds file missing")
    try:
        return [FoldSplit(d["index"], list(d["train"]), list(d["val"])) for d in json.loads(path.read_text())]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed folds file ({exc})") from exc
