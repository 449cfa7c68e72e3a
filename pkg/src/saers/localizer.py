"""Weakly-supervised attribute localization.

Pipeline per attribute: gradient-weighted activation map over the last-conv
feature maps, bilinear upsampling to the image frame, hard thresholding at
20% of the map maximum, bounding box of the largest connected region, and a
1x1 ROI max-pool back on the feature maps to produce the region-specific
attribute feature (one value per channel, so m == T).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from saers.tensor_store import ItemFeatures


@dataclass
class SaliencyMap:
    """Non-negative H x W activation grid plus the (T, H, W) source shape."""

    values: np.ndarray
    source_shape: tuple[int, int, int]


@dataclass
class RegionBBox:
    """Inclusive pixel rectangle in the coordinate frame ``frame=(H, W)``."""

    x0: int
    y0: int
    x1: int
    y1: int
    frame: tuple[int, int]

    def __post_init__(self):
        h, w = self.frame
        if not (0 <= self.x0 <= self.x1 < w and 0 <= self.y0 <= self.y1 < h):
            raise ValueError(f"invalid bbox ({self.x0},{self.y0},{self.x1},{self.y1}) "
                             f"for frame {self.frame}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def grad_aam(F: np.ndarray, G: np.ndarray) -> SaliencyMap:
    """Gradient-weighted activation map: ReLU(sum_t mean(G[t]) * F[t]).

    Channel weights are the spatial means of the gradient maps; the weighted
    channel combination is rectified so the output is non-negative.
    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if F.ndim != 3 or G.ndim != 3:
        raise ValueError(f"expected (T,H,W) maps, got {F.shape} and {G.shape}")
    if F.shape != G.shape:
        raise ValueError(f"feature/gradient shape mismatch: {F.shape} vs {G.shape}")
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(G))):
        raise ValueError("non-finite values in feature or gradient maps")
    alpha = G.mean(axis=(1, 2))
    combined = np.tensordot(alpha, F, axes=1)
    return SaliencyMap(values=np.maximum(combined, 0.0), source_shape=F.shape)


def upsample_bilinear(smap: SaliencyMap, out_h: int, out_w: int) -> SaliencyMap:
    """Align-corners bilinear resize of a saliency map."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    vals = smap.values
    h, w = vals.shape

    def _coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=np.float64)
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    ys = _coords(out_h, h)
    xs = _coords(out_w, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = vals[np.ix_(y0, x0)] * (1 - wx) + vals[np.ix_(y0, x1)] * wx
    bot = vals[np.ix_(y1, x0)] * (1 - wx) + vals[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return SaliencyMap(values=np.maximum(out, 0.0), source_shape=smap.source_shape)


def segment_threshold(smap: SaliencyMap, ratio: float = 0.2) -> np.ndarray:
    """Binary mask of pixels strictly above ``ratio * max``.

    An all-zero map has no segmentable peak; the mask falls back to all ones
    so downstream steps always see at least one region.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"threshold ratio must be in [0, 1), got {ratio}")
    vals = smap.values
    if vals.size == 0:
        raise ValueError("empty saliency map")
    peak = float(vals.max())
    if peak == 0.0:
        return np.ones(vals.shape, dtype=np.uint8)
    return (vals > ratio * peak).astype(np.uint8)


def largest_connected_region(mask: np.ndarray, connectivity: int = 4) -> RegionBBox:
    """Tight bbox of the most-pixels connected component of a binary mask.

    Size ties are broken in favor of the component whose first pixel in
    row-major scan order is smallest by (y, x).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise ValueError("mask has no set pixels")
    if connectivity == 4:
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    elif connectivity == 8:
        structure = np.ones((3, 3), dtype=int)
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, n = ndimage.label(mask != 0, structure=structure)
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    best = int(sizes.max())
    candidates = [lab for lab, size in enumerate(sizes, start=1) if int(size) == best]
    if len(candidates) > 1:
        flat = labels.ravel()
        first_pos = {lab: int(np.flatnonzero(flat == lab)[0]) for lab in candidates}
        winner = min(candidates, key=lambda lab: first_pos[lab])
    else:
        winner = candidates[0]
    ys, xs = np.nonzero(labels == winner)
    h, w = mask.shape
    return RegionBBox(x0=int(xs.min()), y0=int(ys.min()), x1=int(xs.max()), y1=int(ys.max()),
                      frame=(h, w))


def roi_pool(F: np.ndarray, bbox_img: RegionBBox) -> np.ndarray:
    """1x1 ROI max-pool of feature maps over an image-frame bbox.

    The bbox is mapped to map coordinates by x -> floor(x*W/W_img) on the
    low edge and x1 -> ceil((x1+1)*W/W_img)-1 on the high edge (same for y),
    then clamped; each channel contributes its maximum over the mapped
    region, giving a vector of length T.
    """
    F = np.asarray(F)
    if F.ndim != 3:
        raise ValueError(f"expected (T,H,W) feature maps, got shape {F.shape}")
    _, h, w = F.shape
    h_img, w_img = bbox_img.frame

    def _map_low(v, n, n_img):
        return int(np.floor(v * n / n_img))

    def _map_high(v, n, n_img):
        return int(np.ceil((v + 1) * n / n_img)) - 1

    x0 = min(max(_map_low(bbox_img.x0, w, w_img), 0), w - 1)
    y0 = min(max(_map_low(bbox_img.y0, h, h_img), 0), h - 1)
    x1 = min(max(_map_high(bbox_img.x1, w, w_img), x0), w - 1)
    y1 = min(max(_map_high(bbox_img.y1, h, h_img), y0), h - 1)
    region = F[:, y0:y1 + 1, x0:x1 + 1]
    assert region.size > 0, "mapped ROI is empty after clamping"
    return region.max(axis=(1, 2))


def localize_attribute(item: ItemFeatures, attribute: str,
                       image_frame: tuple[int, int],
                       ratio: float = 0.2) -> tuple[RegionBBox, np.ndarray]:
    """Full localization pipeline for one attribute of one item.

    Returns the image-frame bounding box and the pooled attribute feature.
    Requires the item to carry feature and gradient maps for ``attribute``.
    """
    if attribute not in item.feature_maps or attribute not in item.grad_maps:
        raise ValueError(f"item has no feature/gradient maps for attribute {attribute!r}")
    F = item.feature_maps[attribute]
    G = item.grad_maps[attribute]
    smap = grad_aam(F, G)
    h_img, w_img = image_frame
    smap_img = upsample_bilinear(smap, h_img, w_img)
    mask = segment_threshold(smap_img, ratio=ratio)
    bbox = largest_connected_region(mask)
    feature = roi_pool(F, bbox)
    return bbox, feature
