"""Desk-scale synthetic segmentation datasets with a controllable labeled/unlabeled shift.

Images are noisy rasters of filled ellipses (nested for more than two classes);
the unlabeled pool receives an additive intensity offset so labeled and
unlabeled distributions differ by a known amount.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    DatasetSplit,
    LabelMap,
    ValidationError,
    Volume,
    load_manifest,
    save_volume,
)

# Stream tags keep per-sample RNG independent across roles.
_ROLE_STREAM = {"labeled": 0, "unlabeled": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic dataset."""

    image_size: int = 64
    num_classes: int = 2
    shapes_min: int = 1
    shapes_max: int = 3
    class_means: tuple[float, ...] = ()   # per-class intensity means; default spread over [0.2, 0.8]
    noise_sigma: float = 0.05
    shift_delta: float = 0.0              # added to unlabeled-pool intensities only
    axis_frac_min: float = 0.10           # ellipse semi-axis range, as fraction of image_size
    axis_frac_max: float = 0.28
    labeled_count: int = 4
    unlabeled_count: int = 28
    val_count: int = 4
    test_count: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("labeled_count", "unlabeled_count", "val_count", "test_count"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not (0 <= self.shapes_min <= self.shapes_max):
            raise ValidationError("need 0 <= shapes_min <= shapes_max")
        if not (0 < self.axis_frac_min <= self.axis_frac_max < 0.5):
            raise ValidationError("need 0 < axis_frac_min <= axis_frac_max < 0.5")
        if not self.class_means:
            means = tuple(np.linspace(0.2, 0.8, self.num_classes))
            object.__setattr__(self, "class_means", means)
        if len(self.class_means) != self.num_classes:
            raise ValidationError(
                f"class_means has {len(self.class_means)} entries for {self.num_classes} classes"
            )


def _fill_ellipse(label: np.ndarray, center, axes, class_id: int) -> None:
    size = label.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    inside = ((yy - center[0]) / axes[0]) ** 2 + ((xx - center[1]) / axes[1]) ** 2 <= 1.0
    label[inside] = class_id


def sample_image(spec: SynthSpec, rng: np.random.Generator) -> tuple[Volume, LabelMap]:
    """Draw one image/label pair from the spec's distribution.

    Ellipses are placed fully inside the raster (centers keep a semi-axis
    margin), so each shape contributes its exact analytic area.
    """
    size = spec.image_size
    label = np.zeros((size, size), dtype=np.uint8)
    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    lo = spec.axis_frac_min * size
    hi = spec.axis_frac_max * size
    for _ in range(n_shapes):
        class_id = int(rng.integers(1, spec.num_classes))
        a = float(rng.uniform(lo, hi))
        b = float(rng.uniform(lo, hi))
        cy = float(rng.uniform(a, size - a))
        cx = float(rng.uniform(b, size - b))
        _fill_ellipse(label, (cy, cx), (a, b), class_id)
        if spec.num_classes > 2 and class_id < spec.num_classes - 1:
            # Nested inner region of the next class (ring-around-core topology).
            _fill_ellipse(label, (cy, cx), (0.5 * a, 0.5 * b), class_id + 1)

    means = np.asarray(spec.class_means, dtype=np.float64)
    image = means[label]
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.standard_normal(label.shape)
    return (
        Volume((size, size), image.astype(np.float32)),
        LabelMap((size, size), label, spec.num_classes),
    )


def _sample_rng(spec: SynthSpec, role: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.seed, _ROLE_STREAM[role], index)))


def expected_foreground_fraction(spec: SynthSpec) -> float:
    """Analytic expected fraction of non-background voxels for single-shape specs.

    Exact for shapes_min == shapes_max == 1 and num_classes == 2 (no overlap,
    no clipping); used as the Monte-Carlo oracle.
    """
    mean_axis = 0.5 * (spec.axis_frac_min + spec.axis_frac_max) * spec.image_size
    return float(np.pi * mean_axis * mean_axis / spec.image_size**2)


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> DatasetSplit:
    """Generate, persist (PVOL + manifest), and reload a synthetic dataset.

    The unlabeled pool's ground-truth labels are written under ``hidden/`` for
    oracle evaluation only; the manifest never references them. Output bytes
    are a pure function of the spec.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    (out / "hidden").mkdir(exist_ok=True)

    lines = [f"num_classes {spec.num_classes}"]
    role_plan = (
        ("labeled", "lab", spec.labeled_count),
        ("unlabeled", "unl", spec.unlabeled_count),
        ("val", "val", spec.val_count),
        ("test", "tst", spec.test_count),
    )
    for role, prefix, count in role_plan:
        for i in range(count):
            rng = _sample_rng(spec, role, i)
            image, label = sample_image(spec, rng)
            if role == "unlabeled" and spec.shift_delta != 0.0:
                image = Volume(image.dims, image.data + np.float32(spec.shift_delta), image.spacing)
            sample_id = f"{prefix}{i:03d}"
            image_rel = f"images/{sample_id}.pvol"
            save_volume(image, out / image_rel)
            if role == "unlabeled":
                save_volume(label, out / "hidden" / f"{sample_id}.pvol")
                lines.append(f"unlabeled {sample_id} {image_rel}")
            else:
                label_rel = f"labels/{sample_id}.pvol"
                save_volume(label, out / label_rel)
                lines.append(f"{role} {sample_id} {image_rel} {label_rel}")

    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return load_manifest(manifest)
