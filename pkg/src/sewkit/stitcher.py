"""Stitch decoding from per-edge tag embeddings.

Similarity between two edges is the negative squared distance of their
tags. Decoding repeatedly takes the best remaining upper-triangle entry,
emits the pair, and knocks out both edges' rows and columns, stopping when
the best entry drops below the acceptance threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pattern import Stitch

DEFAULT_THRESHOLD = -1.0  # -(margin/2)^2 for the default stitch-loss margin 2


@dataclass
class SimilarityMatrix:
    values: np.ndarray                      # [M, M], symmetric
    edge_ids: list[tuple[int, int]]         # row -> (panel_slot, edge_index)


def similarity_matrix(tags: np.ndarray, edge_ids: list[tuple[int, int]] | None = None) -> SimilarityMatrix:
    """values[a, b] = -|tag_a - tag_b|^2 (identical tags are most similar)."""
    t = np.asarray(tags, dtype=np.float64)
    if t.ndim != 2:
        t = t.reshape(len(t), -1)
    diff = t[:, None, :] - t[None, :, :]
    values = -(diff * diff).sum(axis=-1)
    if edge_ids is None:
        edge_ids = [(0, i) for i in range(len(t))]
    return SimilarityMatrix(values=values, edge_ids=list(edge_ids))


def greedy_decode(
    sim: SimilarityMatrix,
    free_mask: np.ndarray | None = None,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[Stitch]:
    """Iterative maximum selection over the strict upper triangle.

    Free edges never participate. Equal maxima resolve to the smallest
    (row, col) in lexicographic order, so identical inputs give identical
    output. Emitted stitches form a partial matching by construction.
    """
    values = np.asarray(sim.values, dtype=np.float64)
    m = values.shape[0]
    if m == 0:
        return []
    if values.shape != (m, m):
        raise ValueError(f"similarity matrix must be square, got {values.shape}")
    free = (
        np.zeros(m, dtype=bool)
        if free_mask is None
        else np.asarray(free_mask, dtype=bool)
    )
    work = values.copy()
    alive = ~free
    work[np.tril_indices(m)] = -np.inf
    work[~alive, :] = -np.inf
    work[:, ~alive] = -np.inf

    out: list[Stitch] = []
    while True:
        flat = np.argmax(work)  # first max in row-major order = lexicographic tie-break
        a, b = np.unravel_index(flat, work.shape)
        if not np.isfinite(work[a, b]) or work[a, b] < threshold:
            break
        out.append(Stitch(sim.edge_ids[a], sim.edge_ids[b]))
        work[a, :] = -np.inf
        work[:, a] = -np.inf
        work[b, :] = -np.inf
        work[:, b] = -np.inf
    return sorted(out)
