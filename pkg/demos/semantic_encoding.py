"""
Per-pixel class embeddings
==========================

A segmentation map becomes a stack of binary masks, and multiplying the
label-embedding table with the masks writes each class vector into its
pixels. Pixels outside the visible view are relabelled Unknown first.
"""

import numpy as np

from panodiff.geometry import ErpGrid, NfovSpec, nfov_mask
from panodiff.semantic import LabelEmbeddingTable, encode_segmentation, masks_from_seg
from panodiff.synth import synth_segmap

grid = ErpGrid(64, 128)
table = LabelEmbeddingTable.from_labels(["wall", "floor", "bed", "lamp"], dim=8)
print("prompts:", table.prompts)

seg = synth_segmap(grid, table.num_classes, seed=3)
masks = masks_from_seg(seg, table.num_classes)
print("masks sum to one everywhere:", np.array_equal(masks.sum(axis=0), np.ones(seg.shape)))

visible = nfov_mask(grid, NfovSpec(100))
emb = encode_segmentation(seg, table, visible, size=(16, 32))
print("embedding map shape (C_E, h, w):", emb.shape)

unknown = table.table[:, table.unknown_id]
share = np.mean(np.all(emb == unknown[:, None, None], axis=0))
print(f"{share:.0%} of the latent grid is Unknown after masking to a 100 deg view")
