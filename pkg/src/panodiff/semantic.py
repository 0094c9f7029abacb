"""Class-semantic conditioning for panoramas.

A narrow-FOV segmentation map is completed with an extra "Unknown" class
outside the visible region, brought to latent resolution, split into one
binary mask per class, and turned into a per-pixel embedding by looking up
each class's text-embedding column.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

UNKNOWN_LABEL = "Unknown"
PROMPT_PREFIX = "a photo of a "


class EncodingError(ValueError):
    pass


def prompt_template(label: str) -> str:
    """Text prompt used to encode a class label: ``"a photo of a {label}"``."""
    if not isinstance(label, str) or not label:
        raise EncodingError("label must be a non-empty string")
    return PROMPT_PREFIX + label


def _check_ids(ids: np.ndarray, num_classes: int) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise EncodingError(f"segmentation map must be 2-D, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        if not np.all(np.mod(ids, 1) == 0):
            raise EncodingError("segmentation ids must be integers")
        ids = ids.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise EncodingError(f"class ids must lie in [0, {num_classes})")
    return ids


def fill_unknown(ids: np.ndarray, visible: np.ndarray, unknown_id: int) -> np.ndarray:
    """Replace every id outside the ``visible`` mask by ``unknown_id``."""
    ids = np.asarray(ids)
    visible = np.asarray(visible)
    if ids.shape != visible.shape:
        raise EncodingError(f"visible mask {visible.shape} does not match map {ids.shape}")
    return np.where(visible.astype(bool), ids, np.asarray(unknown_id, dtype=ids.dtype))


def downsample_indices(n_src: int, n_dst: int) -> np.ndarray:
    """Source index nearest to each destination pixel center.

    A destination center ``k + 0.5`` maps to source coordinate
    ``(k + 0.5) * n_src / n_dst - 0.5``; ties round up.
    """
    return np.minimum(np.floor((np.arange(n_dst) + 0.5) * n_src / n_dst).astype(np.intp), n_src - 1)


def downsample_seg(ids: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour class-id downsampling to ``(h, w)``; ids are never blended."""
    ids = np.asarray(ids)
    H, W = ids.shape
    if not (1 <= h <= H and 1 <= w <= W):
        raise EncodingError(f"cannot downsample {ids.shape} to {(h, w)}")
    return ids[np.ix_(downsample_indices(H, h), downsample_indices(W, w))]


def masks_from_seg(ids: np.ndarray, num_classes: int) -> np.ndarray:
    """One binary mask per class, shape ``(num_classes, h, w)``, dtype float64."""
    ids = _check_ids(ids, num_classes)
    return (ids[None, :, :] == np.arange(num_classes)[:, None, None]).astype(np.float64)


@dataclass
class LabelEmbeddingTable:
    """Column ``k`` of ``table`` (shape ``(C_E, K)``) embeds ``prompts[k]``."""

    table: np.ndarray
    prompts: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2 or self.table.shape[0] < 1:
            raise EncodingError(f"embedding table must be (C_E >= 1, K), got {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise EncodingError("embedding table contains non-finite entries")
        if self.prompts and len(self.prompts) != self.table.shape[1]:
            raise EncodingError(
                f"{len(self.prompts)} prompts for {self.table.shape[1]} embedding columns"
            )

    @property
    def num_classes(self) -> int:
        return self.table.shape[1]

    @property
    def dim(self) -> int:
        return self.table.shape[0]

    @property
    def unknown_id(self) -> int:
        """Column of the Unknown class; raises if the table has none."""
        try:
            return self.prompts.index(prompt_template(UNKNOWN_LABEL))
        except ValueError:
            raise EncodingError("embedding table has no Unknown class") from None

    @classmethod
    def from_labels(cls, labels, dim: int = 16) -> "LabelEmbeddingTable":
        """Deterministic stand-in for a text encoder.

        Every prompt is hashed to seed a unit-norm Gaussian vector, so the same
        label always gets the same column regardless of table order. The
        Unknown class is appended when missing.
        """
        labels = list(labels)
        if UNKNOWN_LABEL not in labels:
            labels.append(UNKNOWN_LABEL)
        prompts = [prompt_template(lb) for lb in labels]
        cols = []
        for p in prompts:
            seed = int.from_bytes(hashlib.sha256(p.encode("utf-8")).digest()[:8], "little")
            v = np.random.default_rng(seed).standard_normal(dim)
            cols.append(v / np.linalg.norm(v))
        return cls(np.stack(cols, axis=1), prompts)


def pixel_embedding(masks: np.ndarray, table) -> np.ndarray:
    """``E_pixel[:, i, j] = sum_k table[:, k] * masks[k, i, j]``, shape ``(C_E, h, w)``."""
    tab = table.table if isinstance(table, LabelEmbeddingTable) else np.asarray(table, dtype=float)
    masks = np.asarray(masks)
    if masks.ndim != 3 or masks.shape[0] != tab.shape[1]:
        raise EncodingError(
            f"mask stack {masks.shape} does not match table with {tab.shape[1]} classes"
        )
    k, h, w = masks.shape
    return (tab @ masks.reshape(k, h * w)).reshape(tab.shape[0], h, w)


def encode_segmentation(
    ids: np.ndarray,
    table: LabelEmbeddingTable,
    visible: np.ndarray | None = None,
    size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Full pipeline: fill Unknown, downsample to ``size``, mask, embed."""
    if visible is not None:
        ids = fill_unknown(ids, visible, table.unknown_id)
    if size is not None:
        ids = downsample_seg(ids, *size)
    return pixel_embedding(masks_from_seg(ids, table.num_classes), table)
