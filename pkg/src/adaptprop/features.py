"""Window features, synthetic videos, and the on-disk dataset format.

Per-frame feature matrices stand in for C3D descriptors. A window feature is
either the average over every frame in the window (``AVERAGE_POOL``) or the
average over 16 evenly spaced frames (``UNIFORM_SAMPLE_16``).

Dataset directory layout::

    manifest.json        dataset-level metadata, see ``save_dataset``
    <video_id>.tapv      one binary file per video

A ``.tapv`` file is little-endian throughout::

    magic        4 bytes  b"TAPV"
    version      uint32   (1)
    frame_count  uint32
    dim          uint32
    n_gt         uint32
    class_count  uint32
    gts          n_gt x (int32 left, int32 right, int32 class_id)
    features     frame_count x dim float32, row-major
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TemporalWindow

UNIFORM_SAMPLES = 16
BACKGROUND = -1

_MAGIC = b"TAPV"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_GT_DTYPE = np.dtype("<i4")
_FEAT_DTYPE = np.dtype("<f4")


class FeatureMode(str, enum.Enum):
    UNIFORM_SAMPLE_16 = "uniform16"
    AVERAGE_POOL = "avgpool"


@dataclass(frozen=True, eq=False)
class VideoRecord:
    id: str
    frame_features: np.ndarray
    ground_truths: tuple[tuple[TemporalWindow, int], ...]
    class_count: int
    split: str = "train"

    def __post_init__(self):
        feats = np.asarray(self.frame_features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"{self.id}: frame_features must be a non-empty 2-D matrix")
        feats.setflags(write=False)
        object.__setattr__(self, "frame_features", feats)
        gts = tuple((g if isinstance(g, TemporalWindow) else TemporalWindow(*g), int(c))
                    for g, c in self.ground_truths)
        for g, c in gts:
            if g.right > feats.shape[0]:
                raise ValueError(f"{self.id}: ground truth {g} exceeds {feats.shape[0]} frames")
            if not 0 <= c < self.class_count:
                raise ValueError(f"{self.id}: class id {c} out of range")
        object.__setattr__(self, "ground_truths", gts)

    @property
    def frame_count(self) -> int:
        return self.frame_features.shape[0]

    @property
    def dim(self) -> int:
        return self.frame_features.shape[1]

    @property
    def gt_windows(self) -> list[TemporalWindow]:
        return [g for g, _ in self.ground_truths]

    def windows_of_class(self, class_id: int) -> list[TemporalWindow]:
        return [g for g, c in self.ground_truths if c == class_id]

    def has_class(self, class_id: int) -> bool:
        return any(c == class_id for _, c in self.ground_truths)

    def restricted_to(self, class_id: int) -> "VideoRecord":
        """Same video with only the ground truths of one class."""
        return VideoRecord(self.id, self.frame_features,
                           tuple((g, c) for g, c in self.ground_truths if c == class_id),
                           self.class_count, self.split)


def uniform_indices(w: TemporalWindow, n: int = UNIFORM_SAMPLES) -> np.ndarray:
    return w.left + (np.arange(n) * w.span) // n


def window_feature(v: VideoRecord, w: TemporalWindow, mode: FeatureMode) -> np.ndarray:
    if w.right > v.frame_count:
        raise ValueError(f"window {w} outside video {v.id} of {v.frame_count} frames")
    mode = FeatureMode(mode)
    if mode == FeatureMode.AVERAGE_POOL:
        frames = v.frame_features[w.left:w.right]
    else:
        frames = v.frame_features[uniform_indices(w)]
    return frames.mean(axis=0, dtype=np.float64)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic benchmark.

    Video lengths are drawn from ``[len_min, len_max]``, instance counts from
    ``[k_min, k_max]`` and instance lengths from ``[inst_min, inst_max]``;
    neighbouring instances are at least ``gap_min`` frames apart.
    """

    n_train: int = 20
    n_test: int = 20
    len_min: int = 500
    len_max: int = 900
    k_min: int = 1
    k_max: int = 3
    inst_min: int = 40
    inst_max: int = 120
    gap_min: int = 30
    sigma: float = 0.3
    ramp: int = 5
    dim: int = 64
    class_names: tuple[str, ...] = ("class_a", "class_b")
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("video counts must be non-negative")
        if not 1 <= self.len_min <= self.len_max:
            raise ValueError("need 1 <= len_min <= len_max")
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError("need 0 <= k_min <= k_max")
        if not 1 <= self.inst_min <= self.inst_max:
            raise ValueError("need 1 <= inst_min <= inst_max")
        if self.gap_min < 0 or self.ramp < 0 or self.sigma < 0:
            raise ValueError("gap_min, ramp and sigma must be non-negative")
        if self.dim < 1 or self.class_count < 1:
            raise ValueError("need dim >= 1 and at least one class")
        worst = self.k_max * self.inst_max + max(self.k_max - 1, 0) * self.gap_min
        if worst > self.len_min:
            raise ValueError(
                f"infeasible spec: {self.k_max} instances of up to {self.inst_max} frames "
                f"with gaps of {self.gap_min} need {worst} frames, len_min is {self.len_min}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_names"] = list(self.class_names)
        return d


def class_embeddings(seed: int, class_count: int, dim: int) -> np.ndarray:
    """Unit-norm embeddings; rows ``0..class_count-1`` are classes, the last is background."""
    rng = np.random.default_rng([seed, 0])
    emb = rng.standard_normal((class_count + 1, dim))
    return emb / np.linalg.norm(emb, axis=1, keepdims=True)


def _place_instances(rng, spec: SyntheticSpec, length: int) -> list[tuple[int, int]]:
    k = int(rng.integers(spec.k_min, spec.k_max + 1))
    if k == 0:
        return []
    lengths = rng.integers(spec.inst_min, spec.inst_max + 1, size=k)
    slack = length - int(lengths.sum()) - (k - 1) * spec.gap_min
    # split the free frames into k+1 non-negative gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=k))
    extra = np.diff(np.concatenate([[0], cuts]))
    spans, pos = [], 0
    for i in range(k):
        pos += int(extra[i]) + (spec.gap_min if i else 0)
        spans.append((pos, pos + int(lengths[i])))
        pos += int(lengths[i])
    return spans


def _ramp_weights(span: int, ramp: int) -> np.ndarray:
    if ramp == 0:
        return np.ones(span)
    offset = np.arange(span)
    edge = np.minimum(offset, span - 1 - offset)
    return np.minimum(1.0, (edge + 1) / (ramp + 1))


def synthesize_video(rng, spec: SyntheticSpec, emb: np.ndarray, video_id: str, split: str) -> VideoRecord:
    length = int(rng.integers(spec.len_min, spec.len_max + 1))
    spans = _place_instances(rng, spec, length)
    classes = rng.integers(0, spec.class_count, size=len(spans))
    background = emb[-1]
    clean = np.tile(background, (length, 1))
    for (l, r), c in zip(spans, classes):
        wgt = _ramp_weights(r - l, spec.ramp)[:, None]
        clean[l:r] = wgt * emb[c] + (1.0 - wgt) * background
    noise = rng.normal(0.0, spec.sigma, size=clean.shape) if spec.sigma > 0 else 0.0
    feats = (clean + noise).astype(np.float32)
    gts = tuple((TemporalWindow(l, r), int(c)) for (l, r), c in zip(spans, classes))
    return VideoRecord(video_id, feats, gts, spec.class_count, split)


def generate_synthetic_dataset(spec: SyntheticSpec, rng=None) -> list[VideoRecord]:
    """Train videos first, then test videos; ids are ``train_0000``, ``test_0000``, ..."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng([spec.seed, 1])
    emb = class_embeddings(spec.seed, spec.class_count, spec.dim)
    videos = []
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        for i in range(n):
            videos.append(synthesize_video(rng, spec, emb, f"{split}_{i:04d}", split))
    return videos


def atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def encode_video(v: VideoRecord) -> bytes:
    header = _HEADER.pack(_MAGIC, _VERSION, v.frame_count, v.dim, len(v.ground_truths), v.class_count)
    gts = np.array([(g.left, g.right, c) for g, c in v.ground_truths], dtype=_GT_DTYPE).reshape(-1, 3)
    feats = np.ascontiguousarray(v.frame_features, dtype=_FEAT_DTYPE)
    return header + gts.tobytes() + feats.tobytes()


def decode_video(data: bytes, video_id: str, split: str = "train") -> VideoRecord:
    if len(data) < _HEADER.size:
        raise ValueError(f"{video_id}: truncated header")
    magic, version, frames, dim, n_gt, class_count = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError(f"{video_id}: not a version-{_VERSION} .tapv file")
    gt_bytes = n_gt * 3 * 4
    expected = _HEADER.size + gt_bytes + frames * dim * 4
    if len(data) != expected:
        raise ValueError(f"{video_id}: expected {expected} bytes, found {len(data)}")
    gts = np.frombuffer(data, dtype=_GT_DTYPE, count=n_gt * 3, offset=_HEADER.size).reshape(-1, 3)
    feats = np.frombuffer(data, dtype=_FEAT_DTYPE, count=frames * dim,
                          offset=_HEADER.size + gt_bytes).reshape(frames, dim)
    ground_truths = tuple((TemporalWindow(int(l), int(r)), int(c)) for l, r, c in gts)
    return VideoRecord(video_id, feats.astype(np.float32), ground_truths, class_count, split)


@dataclass
class DatasetInfo:
    dim: int
    class_count: int
    class_names: list[str]
    seed: int | None = None
    spec: dict | None = None
    videos: list[dict] = field(default_factory=list)


def save_dataset(videos: list[VideoRecord], out_dir, spec: SyntheticSpec | None = None,
                 class_names=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not videos and spec is None:
        raise ValueError("cannot infer dimensions of an empty dataset without a spec")
    dim = videos[0].dim if videos else spec.dim
    class_count = videos[0].class_count if videos else spec.class_count
    if class_names is None:
        class_names = list(spec.class_names) if spec else [f"class_{i}" for i in range(class_count)]
    entries = []
    for v in videos:
        if v.dim != dim or v.class_count != class_count:
            raise ValueError(f"{v.id}: inconsistent dim or class count")
        fname = f"{v.id}.tapv"
        atomic_write_bytes(out / fname, encode_video(v))
        entries.append({"id": v.id, "split": v.split, "file": fname, "frame_count": v.frame_count})
    manifest = {
        "format": "adaptprop-dataset",
        "version": _VERSION,
        "seed": spec.seed if spec else None,
        "dim": dim,
        "class_count": class_count,
        "class_names": list(class_names),
        "spec": spec.to_dict() if spec else None,
        "videos": entries,
    }
    atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    return out


def load_manifest(data_dir) -> DatasetInfo:
    path = Path(data_dir) / "manifest.json"
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValueError(f"no manifest.json in {data_dir}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt manifest {path}: {exc}") from None
    if m.get("format") != "adaptprop-dataset":
        raise ValueError(f"{path} is not an adaptprop dataset manifest")
    return DatasetInfo(m["dim"], m["class_count"], m["class_names"], m.get("seed"), m.get("spec"),
                       m["videos"])


def load_dataset(data_dir, split: str | None = None) -> list[VideoRecord]:
    info = load_manifest(data_dir)
    videos = []
    for entry in info.videos:
        if split is not None and entry["split"] != split:
            continue
        data = (Path(data_dir) / entry["file"]).read_bytes()
        v = decode_video(data, entry["id"], entry["split"])
        if v.dim != info.dim or v.frame_count != entry["frame_count"]:
            raise ValueError(f"{entry['id']}: does not match manifest")
        videos.append(v)
    return videos
