"""Core value types, the PVOL on-disk volume format, dataset manifests, and run configuration."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class ValidationError(ValueError):
    """A value violates one of its type invariants."""


class FormatError(ValueError):
    """A file is not a well-formed PVOL / manifest / config file."""


class ManifestError(FormatError):
    """A dataset manifest is malformed or references inconsistent data."""


class ConfigError(ValueError):
    """A run configuration is malformed or violates a constraint."""


# PVOL header: magic | u16 version | u8 dtype | u8 rank | 3xu32 dims | 3xf32 spacing
# Exactly 32 bytes, little-endian. dtype 0 = f32 intensities, 1 = u8 labels.
_PVOL_MAGIC = b"PVOL"
_PVOL_VERSION = 1
_PVOL_HEADER = struct.Struct("<4sHBB3I3f")
PVOL_HEADER_SIZE = _PVOL_HEADER.size
assert PVOL_HEADER_SIZE == 32

_DTYPE_REAL = 0
_DTYPE_LABEL = 1


def _coerce_spacing(spacing: Sequence[float] | None, rank: int) -> tuple[float, ...]:
    if spacing is None:
        return (1.0,) * rank
    sp = tuple(float(np.float32(s)) for s in spacing)
    if len(sp) != rank:
        raise ValidationError(f"spacing has {len(sp)} entries for a rank-{rank} volume")
    if any(s <= 0 for s in sp):
        raise ValidationError(f"spacing must be positive, got {sp}")
    return sp


def _coerce_dims(dims: Sequence[int]) -> tuple[int, ...]:
    d = tuple(int(x) for x in dims)
    if len(d) not in (2, 3):
        raise ValidationError(f"rank must be 2 or 3, got dims {d}")
    if any(x < 1 for x in d):
        raise ValidationError(f"all extents must be >= 1, got dims {d}")
    return d


def _frozen_array(data, dims: tuple[int, ...], dtype) -> np.ndarray:
    arr = np.array(data, dtype=dtype, order="C")
    if arr.size != int(np.prod(dims)):
        raise ValidationError(
            f"data has {arr.size} elements, dims {dims} require {int(np.prod(dims))}"
        )
    arr = arr.reshape(dims)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """A dense raster of finite real intensities (single channel).

    ``data`` is row-major with shape ``dims``; ``spacing`` is the physical
    voxel size per axis (values are quantized to f32 so PVOL round-trips are
    exact).
    """

    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    data: np.ndarray

    def __init__(self, dims: Sequence[int], data, spacing: Sequence[float] | None = None):
        dims = _coerce_dims(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _coerce_spacing(spacing, len(dims)))
        arr = _frozen_array(data, dims, np.float32)
        if not np.isfinite(arr).all():
            raise ValidationError("volume intensities must be finite (no NaN/Inf)")
        object.__setattr__(self, "data", arr)

    @property
    def rank(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class LabelMap:
    """A dense raster of integer class ids in [0, num_classes-1]."""

    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    data: np.ndarray
    num_classes: int

    def __init__(
        self,
        dims: Sequence[int],
        data,
        num_classes: int,
        spacing: Sequence[float] | None = None,
    ):
        dims = _coerce_dims(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _coerce_spacing(spacing, len(dims)))
        num_classes = int(num_classes)
        if num_classes < 1 or num_classes > 256:
            raise ValidationError(f"num_classes must be in [1, 256], got {num_classes}")
        raw = np.asarray(data)
        if raw.size and (raw.min() < 0 or raw.max() > num_classes - 1):
            raise ValidationError(
                f"label values must lie in [0, {num_classes - 1}], "
                f"got range [{raw.min()}, {raw.max()}]"
            )
        object.__setattr__(self, "data", _frozen_array(raw, dims, np.uint8))
        object.__setattr__(self, "num_classes", num_classes)

    @property
    def rank(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class Mask:
    """A dense {0, 1} raster selecting copy-paste regions.

    The zero region is a single axis-aligned block when produced by
    ``mixing.generate_mask``; only the value domain is validated here.
    """

    dims: tuple[int, ...]
    data: np.ndarray

    def __init__(self, dims: Sequence[int], data):
        dims = _coerce_dims(dims)
        object.__setattr__(self, "dims", dims)
        raw = np.asarray(data)
        if raw.size and not np.isin(raw, (0, 1)).all():
            raise ValidationError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _frozen_array(raw, dims, np.uint8))

    @property
    def rank(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class LabeledSample:
    sample_id: str
    image: Volume
    label: LabelMap


@dataclass(frozen=True)
class UnlabeledSample:
    sample_id: str
    image: Volume


@dataclass(frozen=True)
class DatasetSplit:
    """Labeled / unlabeled / validation / test pools sharing geometry and classes."""

    labeled: tuple[LabeledSample, ...]
    unlabeled: tuple[UnlabeledSample, ...]
    validation: tuple[LabeledSample, ...]
    test: tuple[LabeledSample, ...]
    num_classes: int

    def validate(self) -> None:
        ids: list[str] = []
        dims = spacing = None
        for pool in (self.labeled, self.unlabeled, self.validation, self.test):
            for s in pool:
                ids.append(s.sample_id)
                if dims is None:
                    dims, spacing = s.image.dims, s.image.spacing
                if s.image.dims != dims or s.image.spacing != spacing:
                    raise ValidationError(
                        f"sample {s.sample_id!r}: dims/spacing {s.image.dims}/{s.image.spacing} "
                        f"differ from the split's {dims}/{spacing}"
                    )
                label = getattr(s, "label", None)
                if label is not None:
                    if label.dims != s.image.dims:
                        raise ValidationError(
                            f"sample {s.sample_id!r}: label dims {label.dims} "
                            f"!= image dims {s.image.dims}"
                        )
                    if label.num_classes != self.num_classes:
                        raise ValidationError(
                            f"sample {s.sample_id!r}: num_classes {label.num_classes} "
                            f"!= split num_classes {self.num_classes}"
                        )
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate sample ids across roles: {dupes}")


def save_volume(v: Volume | LabelMap, path: str | Path) -> None:
    """Write ``v`` in the PVOL format; round-trips bit-exactly through load_volume."""
    if isinstance(v, LabelMap):
        dtype_code, payload = _DTYPE_LABEL, v.data.astype("<u1", copy=False)
    elif isinstance(v, Volume):
        dtype_code, payload = _DTYPE_REAL, v.data.astype("<f4", copy=False)
    else:
        raise ValidationError(f"save_volume expects Volume or LabelMap, got {type(v).__name__}")
    dims3 = v.dims + (1,) * (3 - v.rank)
    spacing3 = v.spacing + (1.0,) * (3 - v.rank)
    header = _PVOL_HEADER.pack(_PVOL_MAGIC, _PVOL_VERSION, dtype_code, v.rank, *dims3, *spacing3)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="C"))


def load_volume(path: str | Path, num_classes: int | None = None) -> Volume | LabelMap:
    """Load a PVOL file; the dtype code selects Volume (real) vs LabelMap (integer).

    ``num_classes`` overrides the inferred class count (max value + 1) for labels.
    """
    with open(path, "rb") as f:
        header = f.read(PVOL_HEADER_SIZE)
        if len(header) < PVOL_HEADER_SIZE:
            raise FormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, version, dtype_code, rank, d0, d1, d2, s0, s1, s2 = _PVOL_HEADER.unpack(header)
        if magic != _PVOL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != _PVOL_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if rank not in (2, 3):
            raise FormatError(f"{path}: rank must be 2 or 3, got {rank}")
        if dtype_code not in (_DTYPE_REAL, _DTYPE_LABEL):
            raise FormatError(f"{path}: unknown dtype code {dtype_code}")
        dims = (d0, d1, d2)[:rank]
        trailing = (d0, d1, d2)[rank:]
        if any(t != 1 for t in trailing):
            raise FormatError(f"{path}: unused trailing dims must be 1, got {trailing}")
        spacing = (s0, s1, s2)[:rank]
        count = int(np.prod(dims))
        np_dtype = "<f4" if dtype_code == _DTYPE_REAL else "<u1"
        payload = f.read()
    expected = count * np.dtype(np_dtype).itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=np_dtype).reshape(dims)
    if dtype_code == _DTYPE_REAL:
        return Volume(dims, data, spacing)
    if num_classes is None:
        num_classes = int(data.max()) + 1 if data.size else 1
    return LabelMap(dims, data, num_classes, spacing)


_MANIFEST_ROLES = ("labeled", "unlabeled", "val", "test")


def load_manifest(path: str | Path) -> DatasetSplit:
    """Load a line-oriented manifest: ``<role> <id> <image-path> [<label-path>]``.

    Paths are relative to the manifest's directory. An optional
    ``num_classes <M>`` directive declares the class count; otherwise it is
    inferred from the label data. Ordering is the manifest order.
    """
    path = Path(path)
    base = path.parent
    num_classes: int | None = None
    entries: list[tuple[int, str, str, str, str | None]] = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "num_classes":
            if len(parts) != 2 or not parts[1].isdigit():
                raise ManifestError(f"{path}:{lineno}: malformed num_classes directive: {raw!r}")
            if num_classes is not None:
                raise ManifestError(f"{path}:{lineno}: duplicate num_classes directive")
            num_classes = int(parts[1])
            continue
        role = parts[0]
        if role not in _MANIFEST_ROLES:
            raise ManifestError(
                f"{path}:{lineno}: unknown role {role!r} (expected one of {_MANIFEST_ROLES})"
            )
        if role == "unlabeled":
            if len(parts) != 3:
                raise ManifestError(
                    f"{path}:{lineno}: unlabeled entries take exactly <id> <image-path>: {raw!r}"
                )
            entries.append((lineno, role, parts[1], parts[2], None))
        else:
            if len(parts) != 4:
                raise ManifestError(
                    f"{path}:{lineno}: {role} entries take <id> <image-path> <label-path>: {raw!r}"
                )
            entries.append((lineno, role, parts[1], parts[2], parts[3]))

    pools: dict[str, list] = {r: [] for r in _MANIFEST_ROLES}
    for lineno, role, sample_id, image_rel, label_rel in entries:
        image_path = base / image_rel
        if not image_path.exists():
            raise ManifestError(f"{path}:{lineno}: missing image file {image_path}")
        image = load_volume(image_path)
        if not isinstance(image, Volume):
            raise ManifestError(f"{path}:{lineno}: {image_path} holds labels, not intensities")
        if label_rel is None:
            pools[role].append(UnlabeledSample(sample_id, image))
            continue
        label_path = base / label_rel
        if not label_path.exists():
            raise ManifestError(f"{path}:{lineno}: missing label file {label_path}")
        try:
            label = load_volume(label_path, num_classes=num_classes)
        except ValidationError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e
        if not isinstance(label, LabelMap):
            raise ManifestError(f"{path}:{lineno}: {label_path} holds intensities, not labels")
        pools[role].append(LabeledSample(sample_id, image, label))

    if num_classes is None:
        label_maxes = [
            int(s.label.data.max()) if s.label.data.size else 0
            for r in ("labeled", "val", "test")
            for s in pools[r]
        ]
        num_classes = max(label_maxes, default=0) + 1
    # Re-wrap labels under the declared/inferred class count so the split is uniform.
    for role in ("labeled", "val", "test"):
        rewrapped = []
        for s in pools[role]:
            if s.label.num_classes != num_classes:
                try:
                    label = LabelMap(s.label.dims, s.label.data, num_classes, s.label.spacing)
                except ValidationError as e:
                    raise ManifestError(f"{path}: sample {s.sample_id!r}: {e}") from e
                s = LabeledSample(s.sample_id, s.image, label)
            rewrapped.append(s)
        pools[role] = rewrapped

    split = DatasetSplit(
        labeled=tuple(pools["labeled"]),
        unlabeled=tuple(pools["unlabeled"]),
        validation=tuple(pools["val"]),
        test=tuple(pools["test"]),
        num_classes=num_classes,
    )
    try:
        split.validate()
    except ValidationError as e:
        raise ManifestError(f"{path}: {e}") from e
    return split


@dataclass(frozen=True)
class RunConfig:
    """Training/evaluation configuration. File keys and CLI overrides use the field names."""

    alpha: float = 0.05          # alignment loss weight
    beta: float = 0.01           # clustering loss weight
    gamma: float = 0.5           # pseudo-region loss weight
    mu: float = 2.0              # similarity shift divisor
    lambda_ema: float = 0.99     # teacher EMA coefficient
    lr: float = 0.01
    tap_layer: int = 1           # encoder layer feeding the similarity graph (1-based)
    grid_size: int = 16          # pooled node grid side
    num_clusters: int = 2
    batch_size: int = 4          # mixed pairs per step
    pretrain_iters: int = 300
    selftrain_iters: int = 600
    mask_ratio: float = 2.0 / 3.0
    seed: int = 0
    optimizer: str = "sgd"       # "sgd" (momentum 0.9) or "adam"
    out_dir: str = "runs"
    # Architecture and bookkeeping knobs.
    encoder_depth: int = 5
    base_channels: int = 8
    graph_fusion: bool = True
    fusion_point: str = "tap"    # "tap" or "bottleneck"
    sgd_momentum: float = 0.9
    checkpoint_interval: int = 200
    # Experiment switches for the interpretation points left open upstream.
    row_norm_adjacency: bool = False
    teacher_align_grad: bool = False
    cluster_loss_on_teacher: bool = False
    region_norm: str = "region"  # "region" or "total"
    kde_source: str = "probability"  # "probability" or "feature"

    def __post_init__(self):
        def check(cond: bool, constraint: str) -> None:
            if not cond:
                raise ConfigError(f"config violates: {constraint}")

        check(self.alpha >= 0, f"alpha >= 0 (got {self.alpha})")
        check(self.beta >= 0, f"beta >= 0 (got {self.beta})")
        check(0 <= self.gamma <= 1, f"0 <= gamma <= 1 (got {self.gamma})")
        check(self.mu > 0, f"mu > 0 (got {self.mu})")
        check(0 <= self.lambda_ema <= 1, f"0 <= lambda_ema <= 1 (got {self.lambda_ema})")
        check(self.lr > 0, f"lr > 0 (got {self.lr})")
        check(
            1 <= self.tap_layer <= self.encoder_depth,
            f"1 <= tap_layer <= encoder_depth={self.encoder_depth} (got {self.tap_layer})",
        )
        check(0 < self.mask_ratio < 1, f"0 < mask_ratio < 1 (got {self.mask_ratio})")
        check(self.grid_size >= 1, f"grid_size >= 1 (got {self.grid_size})")
        check(self.num_clusters >= 1, f"num_clusters >= 1 (got {self.num_clusters})")
        check(self.batch_size >= 1, f"batch_size >= 1 (got {self.batch_size})")
        check(self.pretrain_iters >= 0, f"pretrain_iters >= 0 (got {self.pretrain_iters})")
        check(self.selftrain_iters >= 0, f"selftrain_iters >= 0 (got {self.selftrain_iters})")
        check(self.encoder_depth >= 1, f"encoder_depth >= 1 (got {self.encoder_depth})")
        check(self.base_channels >= 1, f"base_channels >= 1 (got {self.base_channels})")
        check(0 <= self.sgd_momentum < 1, f"0 <= sgd_momentum < 1 (got {self.sgd_momentum})")
        check(
            self.checkpoint_interval >= 1,
            f"checkpoint_interval >= 1 (got {self.checkpoint_interval})",
        )
        check(self.optimizer in ("sgd", "adam"), f"optimizer in {{sgd, adam}} (got {self.optimizer!r})")
        check(
            self.fusion_point in ("tap", "bottleneck"),
            f"fusion_point in {{tap, bottleneck}} (got {self.fusion_point!r})",
        )
        check(
            self.region_norm in ("region", "total"),
            f"region_norm in {{region, total}} (got {self.region_norm!r})",
        )
        check(
            self.kde_source in ("probability", "feature"),
            f"kde_source in {{probability, feature}} (got {self.kde_source!r})",
        )


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, text: str):
    f = _CONFIG_FIELDS[key]
    text = text.strip()
    if f.type in ("bool", bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {text!r}")
    try:
        if f.type in ("int", int):
            return int(text)
        if f.type in ("float", float):
            return float(text)
    except ValueError as e:
        raise ConfigError(f"key {key!r}: {e}") from e
    return text


def parse_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | None = None,
) -> RunConfig:
    """Build a RunConfig from defaults, then a ``key = value`` file, then CLI overrides."""
    values: dict = {}
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                    f"{', '.join(sorted(_CONFIG_FIELDS))}"
                )
            values[key] = _parse_value(key, text)
    for key, text in (overrides or {}).items():
        if key not in _CONFIG_FIELDS:
            raise ConfigError(
                f"unknown override key {key!r}; valid keys: {', '.join(sorted(_CONFIG_FIELDS))}"
            )
        values[key] = _parse_value(key, str(text))
    return RunConfig(**values)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    """Write ``cfg`` as a ``key = value`` file readable by parse_config."""
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n")


def config_digest(cfg: RunConfig) -> str:
    """Stable short digest of a config, for report metadata."""
    import hashlib

    text = ",".join(f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(RunConfig))
    return hashlib.sha256(text.encode()).hexdigest()[:12]
