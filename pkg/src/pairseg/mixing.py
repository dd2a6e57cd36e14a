"""Bidirectional copy-paste: block mask generation, image mixing, and label mixing.

Convention (matching the crop-and-paste semantics): the mask's ZERO region is
the single axis-aligned block that carries the pasted foreground from the
second source; the ONE region keeps the first source's background. Mixing is a
pure per-voxel selection, never an interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .datamodel import LabelMap, Mask, ValidationError, Volume


@dataclass(frozen=True)
class MixedSample:
    """One mixed image/label with its generating mask and provenance.

    direction "p" pastes an unlabeled foreground into a labeled background;
    direction "q" pastes a labeled foreground into an unlabeled background.
    The foreground source fills the mask's zero block, the background source
    fills the one region.
    """

    image: Volume
    label: LabelMap
    mask: Mask
    foreground_id: str
    background_id: str
    direction: Literal["p", "q"]

    def __post_init__(self):
        if not (self.image.dims == self.label.dims == self.mask.dims):
            raise ValidationError(
                f"mixed sample dims disagree: image {self.image.dims}, "
                f"label {self.label.dims}, mask {self.mask.dims}"
            )
        if self.direction not in ("p", "q"):
            raise ValidationError(f"direction must be 'p' or 'q', got {self.direction!r}")


def generate_mask(
    dims: Sequence[int],
    mask_ratio: float,
    rng: np.random.Generator,
) -> Mask:
    """Mask with a zero block of per-axis extent round(mask_ratio * dim), placed uniformly."""
    if not (0 < mask_ratio < 1):
        raise ValidationError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    dims = tuple(int(d) for d in dims)
    extents = tuple(int(np.floor(mask_ratio * d + 0.5)) for d in dims)
    if any(e < 1 for e in extents):
        raise ValidationError(
            f"block extent {extents} has an axis below 1 voxel (dims {dims}, ratio {mask_ratio})"
        )
    offsets = tuple(int(rng.integers(0, d - e + 1)) for d, e in zip(dims, extents))
    data = np.ones(dims, dtype=np.uint8)
    region = tuple(slice(o, o + e) for o, e in zip(offsets, extents))
    data[region] = 0
    return Mask(dims, data)


def _check_geometry(volumes: Sequence[Volume | LabelMap], mask: Mask) -> None:
    dims = volumes[0].dims
    spacing = volumes[0].spacing
    for v in volumes[1:]:
        if v.dims != dims:
            raise ValidationError(f"mixing sources disagree on dims: {v.dims} vs {dims}")
        if v.spacing != spacing:
            raise ValidationError(f"mixing sources disagree on spacing: {v.spacing} vs {spacing}")
    if mask.dims != dims:
        raise ValidationError(f"mask dims {mask.dims} do not match source dims {dims}")


def mix_images(
    x_a_l: Volume,
    x_b_l: Volume,
    x_s_u: Volume,
    x_t_u: Volume,
    mask: Mask,
) -> tuple[Volume, Volume]:
    """Voxel-exact bidirectional mix of two labeled and two unlabeled images.

    Returns (x_mix_p, x_mix_q): p keeps x_b_l where the mask is one and takes
    x_t_u in the zero block; q keeps x_s_u where the mask is one and takes
    x_a_l in the zero block.
    """
    _check_geometry((x_a_l, x_b_l, x_s_u, x_t_u), mask)
    keep = mask.data.astype(bool)
    x_mix_p = np.where(keep, x_b_l.data, x_t_u.data)
    x_mix_q = np.where(keep, x_s_u.data, x_a_l.data)
    spacing = x_a_l.spacing
    return (
        Volume(x_b_l.dims, x_mix_p, spacing),
        Volume(x_s_u.dims, x_mix_q, spacing),
    )


def mix_labels(
    y_a_l: LabelMap,
    y_b_l: LabelMap,
    l_s_p: LabelMap,
    l_t_p: LabelMap,
    mask: Mask,
) -> tuple[LabelMap, LabelMap]:
    """Label-space counterpart of mix_images, over true labels and pseudo-labels."""
    sources = (y_a_l, y_b_l, l_s_p, l_t_p)
    _check_geometry(sources, mask)
    num_classes = y_a_l.num_classes
    for lm in sources[1:]:
        if lm.num_classes != num_classes:
            raise ValidationError(
                f"mixing labels disagree on num_classes: {lm.num_classes} vs {num_classes}"
            )
    keep = mask.data.astype(bool)
    l_mix_p = np.where(keep, y_b_l.data, l_t_p.data)
    l_mix_q = np.where(keep, l_s_p.data, y_a_l.data)
    spacing = y_a_l.spacing
    return (
        LabelMap(y_b_l.dims, l_mix_p, num_classes, spacing),
        LabelMap(y_a_l.dims, l_mix_q, num_classes, spacing),
    )


def mix_pair(
    a_id: str,
    x_a_l: Volume,
    y_a_l: LabelMap,
    b_id: str,
    x_b_l: Volume,
    y_b_l: LabelMap,
    s_id: str,
    x_s_u: Volume,
    l_s_p: LabelMap,
    t_id: str,
    x_t_u: Volume,
    l_t_p: LabelMap,
    mask: Mask,
) -> tuple[MixedSample, MixedSample]:
    """Assemble both mixed samples of one (a, b, s, t) draw under a shared mask."""
    x_mix_p, x_mix_q = mix_images(x_a_l, x_b_l, x_s_u, x_t_u, mask)
    l_mix_p, l_mix_q = mix_labels(y_a_l, y_b_l, l_s_p, l_t_p, mask)
    p = MixedSample(x_mix_p, l_mix_p, mask, foreground_id=t_id, background_id=b_id, direction="p")
    q = MixedSample(x_mix_q, l_mix_q, mask, foreground_id=a_id, background_id=s_id, direction="q")
    return p, q
