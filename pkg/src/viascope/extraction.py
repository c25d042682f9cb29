"""Via detection on grayscale cell images.

Two detectors are provided. Grayscale thresholding with morphological
erosion is fast and adequate for clean imagery; zero-dimensional
superlevel-set persistence is threshold-free and holds up under low
contrast and uneven illumination. Both emit via centers in node units.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .geometry import ViaSet

METHOD_THRESHOLD = "threshold"
METHOD_PERSISTENCE = "persistence"

_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class GrayImage:
    """An 8-bit grayscale image, row-major, intensities in [0, 255]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D grayscale array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
                raise ValueError("intensities must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @classmethod
    def load(cls, path) -> "GrayImage":
        """Read an 8-bit grayscale PNG or single-page grayscale TIFF."""
        with Image.open(path) as img:
            if img.mode != "L":
                raise ValueError(
                    f"{path}: expected 8-bit grayscale (mode L), got mode {img.mode}"
                )
            return cls(np.asarray(img, dtype=np.uint8))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(self.data)).save(path)


@dataclass(frozen=True)
class ExtractionConfig:
    """Parameters for via detection and the pixel-to-unit mapping.

    Exactly one method is active per run. ``origin_offset`` is the pixel
    position of the local coordinate origin, typically the un-margined
    bounding-box corner of the cell being processed.
    """

    method: str = METHOD_THRESHOLD
    binarize_threshold: int = 128
    erosion_radius: int = 1
    min_blob_area: int = 4
    persistence_threshold: int = 50
    pixels_per_unit: float = 10.0
    origin_offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.method not in (METHOD_THRESHOLD, METHOD_PERSISTENCE):
            raise ValueError(f"unknown extraction method {self.method!r}")
        if self.erosion_radius < 0:
            raise ValueError("erosion_radius must be >= 0")
        if self.min_blob_area < 1:
            raise ValueError("min_blob_area must be >= 1")
        if self.persistence_threshold <= 0:
            raise ValueError("persistence_threshold must be positive")
        if self.pixels_per_unit <= 0:
            raise ValueError("pixels_per_unit must be positive")


def pixels_to_units(points, cfg: ExtractionConfig) -> np.ndarray:
    """Map pixel coordinates to node units relative to the configured origin."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return (pts - np.asarray(cfg.origin_offset, dtype=float)) / cfg.pixels_per_unit


def units_to_pixels(points, cfg: ExtractionConfig) -> np.ndarray:
    """Inverse of :func:`pixels_to_units`."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return pts * cfg.pixels_per_unit + np.asarray(cfg.origin_offset, dtype=float)


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.ogrid[-radius : radius + 1, -radius : radius + 1]
    return (xx * xx + yy * yy) <= radius * radius


def detect_vias_threshold(img: GrayImage, cfg: ExtractionConfig, source: str = "") -> ViaSet:
    """Binarize, erode, label 8-connected components, and emit one via per
    surviving component.

    Components smaller than ``min_blob_area`` after erosion are dropped.
    Centers are intensity-weighted centroids over the pre-erosion pixels of
    each component, so erosion only removes noise and never biases the
    localization.
    """
    if img.data.size == 0:
        raise ValueError("zero-sized image")
    mask = img.data >= cfg.binarize_threshold
    if not mask.any():
        return ViaSet((), source)
    if cfg.erosion_radius > 0:
        eroded = ndi.binary_erosion(mask, structure=_disk(cfg.erosion_radius))
    else:
        eroded = mask
    labels, nlab = ndi.label(eroded, structure=_STRUCTURE_8)
    if nlab == 0:
        return ViaSet((), source)
    areas = np.bincount(labels.ravel(), minlength=nlab + 1)
    keep = np.flatnonzero(areas >= cfg.min_blob_area)
    keep = keep[keep > 0]
    if keep.size == 0:
        return ViaSet((), source)

    # Recover each surviving component's pre-erosion pixels: a pixel of the
    # binarized mask belongs to the nearest surviving component, provided
    # both sit inside the same pre-erosion connected component. This keeps
    # fully-eroded noise blobs out and splits shared parents deterministically.
    pre_labels, _ = ndi.label(mask, structure=_STRUCTURE_8)
    surv = np.isin(labels, keep)
    labels_surv = np.where(surv, labels, 0)
    _, (iy, ix) = ndi.distance_transform_edt(~surv, return_indices=True)
    nearest = labels_surv[iy, ix]
    parent_of = np.zeros(nlab + 1, dtype=pre_labels.dtype)
    first_pix = ndi.minimum_position(np.zeros_like(labels), labels=labels, index=keep)
    for lab, pos in zip(keep, np.atleast_2d(first_pix)):
        parent_of[lab] = pre_labels[tuple(pos)]
    sel = mask & (nearest > 0) & (pre_labels == parent_of[nearest])

    w = img.data[sel].astype(float)
    lab_sel = nearest[sel]
    ys, xs = np.nonzero(sel)
    sums_w = np.bincount(lab_sel, weights=w, minlength=nlab + 1)
    sums_x = np.bincount(lab_sel, weights=w * xs, minlength=nlab + 1)
    sums_y = np.bincount(lab_sel, weights=w * ys, minlength=nlab + 1)
    centers_px = np.column_stack([sums_x[keep] / sums_w[keep], sums_y[keep] / sums_w[keep]])
    return ViaSet(pixels_to_units(centers_px, cfg), source)


_NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _find(parent: np.ndarray, x: int) -> int:
    # Path-halving union-find lookup.
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = int(parent[x])
    return x


def detect_vias_persistence(img: GrayImage, cfg: ExtractionConfig, source: str = "") -> ViaSet:
    """Detect vias as long-lived bright peaks via superlevel-set persistence.

    Pixels are processed in descending intensity (row-major index breaks
    ties) while a union-find structure tracks connected components of the
    already-processed pixels. A component is born at its maximum; when two
    components meet, the one with the dimmer birth dies at the merge
    intensity (elder rule, birth-intensity ties broken by row-major birth
    index). Components whose lifetime ``birth - death`` reaches the
    persistence threshold become vias; the component of the global maximum
    never dies and uses the image minimum as its effective death.

    Each retained component is localized at the intensity-weighted centroid
    of its own accreted pixels at or above ``death + persistence / 2``, the
    upper half of the peak, which suppresses skirt noise. Pixels absorbed
    through merges stay attributed to the component that collected them, so
    neighboring peaks never bleed into each other's centroids.
    """
    if img.data.size == 0:
        raise ValueError("zero-sized image")
    h, w = img.data.shape
    inten = img.data.ravel().astype(np.int64)
    n = inten.size
    order = np.lexsort((np.arange(n), -inten))
    parent = np.arange(n, dtype=np.int64)
    accreted_to = np.full(n, -1, dtype=np.int64)  # component id (birth pixel) per pixel
    processed = np.zeros(n, dtype=bool)
    death: dict[int, int] = {}

    for p in order:
        p = int(p)
        pr, pc = divmod(p, w)
        roots = set()
        for dr, dc in _NEIGHBOR_OFFSETS:
            rr, cc = pr + dr, pc + dc
            if 0 <= rr < h and 0 <= cc < w:
                q = rr * w + cc
                if processed[q]:
                    roots.add(_find(parent, q))
        if not roots:
            accreted_to[p] = p  # new component born at its maximum pixel
        else:
            winner = min(roots, key=lambda cid: (-inten[cid], cid))
            for cid in roots:
                if cid != winner:
                    death[cid] = int(inten[p])
                    parent[cid] = winner
            parent[p] = winner
            accreted_to[p] = winner
        processed[p] = True

    img_min = int(inten.min())
    survivor = _find(parent, int(order[-1]))
    centers_px = []
    component_ids = sorted(death.keys()) + [survivor]
    for cid in component_ids:
        birth = int(inten[cid])
        d = death.get(cid, img_min)
        pers = birth - d
        if pers < cfg.persistence_threshold:
            continue
        members = np.flatnonzero(accreted_to == cid)
        cutoff = d + pers / 2.0
        sel = members[inten[members] >= cutoff]
        wgt = inten[sel].astype(float)
        xs = (sel % w).astype(float)
        ys = (sel // w).astype(float)
        total = wgt.sum()
        centers_px.append((float((wgt * xs).sum() / total), float((wgt * ys).sum() / total)))

    if not centers_px:
        return ViaSet((), source)
    return ViaSet(pixels_to_units(np.asarray(centers_px), cfg), source)


def detect_vias(img: GrayImage, cfg: ExtractionConfig, source: str = "") -> ViaSet:
    """Run the configured detector on one image."""
    if cfg.method == METHOD_THRESHOLD:
        return detect_vias_threshold(img, cfg, source)
    return detect_vias_persistence(img, cfg, source)


def with_origin(cfg: ExtractionConfig, origin_offset, pixels_per_unit: float | None = None) -> ExtractionConfig:
    """Copy of ``cfg`` with a new local origin (and optionally pixel pitch)."""
    kwargs = {"origin_offset": (float(origin_offset[0]), float(origin_offset[1]))}
    if pixels_per_unit is not None:
        kwargs["pixels_per_unit"] = float(pixels_per_unit)
    return replace(cfg, **kwargs)
