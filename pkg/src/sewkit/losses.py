"""Differentiable training losses over padded pattern tensors.

The shape loss densifies per-edge supervision: panel vertices (edge
endpoints and Bezier midpoints) are connected pairwise into support
vectors, and the squared L2 error is taken over all of them. Compared to
the plain per-edge loss this redistributes gradient toward edges with
larger errors, preferring evenly spread residuals over concentrated ones.

All losses are pure functions of Tensors plus ground-truth arrays, exactly
zero at ground truth, and differentiable through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .pattern import PatternTensor

_PERP = np.array([[0.0, 1.0], [-1.0, 0.0]])  # row-vector (x,y) -> (-y,x)
_ONES_1X2 = np.ones((1, 2))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0   # panel terms (shape + loop + rt)
    lambda2: float = 0.5    # stitch term
    lambda3: float = 1.0    # pose term


@dataclass(frozen=True)
class StitchLossConfig:
    margin: float = 2.0
    neg_samples: int = 4
    bce_weight: float = 1.0


@dataclass
class LossParts:
    shape: Tensor
    loop: Tensor
    rt: Tensor
    stitch: Tensor
    pose: Tensor


_TRI_CACHE: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
_PAIR_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _tri(n: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """(inclusive, strict) lower-triangular ones; cumsum as a matmul."""
    key = (n, np.dtype(dtype).str)
    if key not in _TRI_CACHE:
        inc = np.tril(np.ones((n, n), dtype=dtype))
        _TRI_CACHE[key] = (inc, inc - np.eye(n, dtype=dtype))
    return _TRI_CACHE[key]


def _pairs(n_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    if n_vertices not in _PAIR_CACHE:
        _PAIR_CACHE[n_vertices] = np.triu_indices(n_vertices, k=1)
    return _PAIR_CACHE[n_vertices]


def panel_vertices_t(edge_rows: Tensor) -> Tensor:
    """Differentiable endpoint/midpoint vertices of an [n, 4] edge block.

    Mirrors the geometry-module vertex order [end0, mid0, end1, mid1, ...]
    using the literal Bezier-midpoint formula (no straight-edge sentinel
    handling: the generator stores straight edges with the canonical
    on-chord control, so targets and predictions agree).
    """
    n = edge_rows.shape[0]
    dtype = edge_rows.data.dtype
    inc, strict = _tri(n, dtype)
    dxy = edge_rows[:, 0:2]
    ends = ad.matmul(ad.constant(inc, dtype), dxy)
    starts = ad.matmul(ad.constant(strict, dtype), dxy)
    cx = ad.matmul(edge_rows[:, 2:3], ad.constant(_ONES_1X2, dtype))
    cy = ad.matmul(edge_rows[:, 3:4], ad.constant(_ONES_1X2, dtype))
    perp = ad.matmul(dxy, ad.constant(_PERP, dtype))
    ctrl = starts + cx * dxy + cy * perp
    mids = 0.25 * starts + 0.5 * ctrl + 0.25 * ends
    inter = ad.concat([ends.reshape(n, 1, 2), mids.reshape(n, 1, 2)], axis=1)
    return inter.reshape(2 * n, 2)


def support_vectors_t(vertices: Tensor) -> Tensor:
    ia, ib = _pairs(vertices.shape[0])
    return ad.gather(vertices, ib, axis=0) - ad.gather(vertices, ia, axis=0)


def _masked_mean(per_slot: Tensor, mask: np.ndarray) -> Tensor:
    n_valid = int(mask.sum())
    if n_valid == 0:
        return ad.constant(0.0, per_slot.data.dtype)
    w = ad.constant(mask.astype(per_slot.data.dtype), per_slot.data.dtype)
    return ad.sum_(per_slot * w) * (1.0 / n_valid)


def shape_loss(pred_edges: Tensor, gt: PatternTensor, mask: np.ndarray | None = None) -> Tensor:
    """Support-vector shape loss, averaged over valid panels.

    Per panel: vertices from the first n_k edges (n_k = ground-truth edge
    count), all C(2*n_k, 2) support vectors, mean squared L2 over vectors.
    """
    mask = gt.panel_mask if mask is None else mask
    dtype = pred_edges.data.dtype
    terms = []
    for k in np.flatnonzero(mask):
        n_k = int(gt.edge_mask[k].sum())
        pred_verts = panel_vertices_t(pred_edges[k, :n_k, :])
        gt_verts = _np_vertices(gt.edges[k, :n_k, :])
        sv_pred = support_vectors_t(pred_verts)
        ia, ib = _pairs(2 * n_k)
        sv_gt = gt_verts[ib] - gt_verts[ia]
        d = sv_pred - ad.constant(sv_gt, dtype)
        terms.append(ad.mean(ad.sum_(d * d, axis=-1)))
    if not terms:
        return ad.constant(0.0, dtype)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def shape_loss_nt(pred_edges: Tensor, gt: PatternTensor, mask: np.ndarray | None = None) -> Tensor:
    """Per-edge baseline: mean over valid panels of mean squared row error."""
    mask = gt.panel_mask if mask is None else mask
    dtype = pred_edges.data.dtype
    terms = []
    for k in np.flatnonzero(mask):
        n_k = int(gt.edge_mask[k].sum())
        d = pred_edges[k, :n_k, :] - ad.constant(gt.edges[k, :n_k, :], dtype)
        terms.append(ad.mean(ad.sum_(d * d, axis=-1)))
    if not terms:
        return ad.constant(0.0, dtype)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def loop_loss(pred_edges: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared loop residual |sum_j (dx_j, dy_j)|^2 over valid panels."""
    dxy = pred_edges[:, :, 0:2]
    resid = ad.sum_(dxy, axis=1)
    per_slot = ad.sum_(resid * resid, axis=-1)
    return _masked_mean(per_slot, mask)


def rt_loss(pred_rot: Tensor, pred_trans: Tensor, gt: PatternTensor,
            mask: np.ndarray | None = None) -> Tensor:
    """Rotation (sign-aligned) plus translation squared error over valid panels.

    The quaternion double cover is handled by min(|q-q^|^2, |q+q^|^2); at a
    tie the +q branch carries the gradient.
    """
    mask = gt.panel_mask if mask is None else mask
    dtype = pred_rot.data.dtype
    gt_rot = ad.constant(gt.rot, dtype)
    gt_trans = ad.constant(gt.trans, dtype)
    dm = pred_rot - gt_rot
    dp = pred_rot + gt_rot
    a = ad.sum_(dm * dm, axis=-1)
    b = ad.sum_(dp * dp, axis=-1)
    rot_term = a - ad.relu(a - b)  # min(a, b), tie -> a
    dt = pred_trans - gt_trans
    trans_term = ad.sum_(dt * dt, axis=-1)
    return _masked_mean(rot_term + trans_term, mask)


def pose_loss(theta_pred: Tensor, theta_gt: np.ndarray) -> Tensor:
    gt_arr = np.asarray(theta_gt)
    if theta_pred.shape != gt_arr.shape:
        raise ShapeMismatch(f"pose shapes differ: {theta_pred.shape} vs {gt_arr.shape}")
    d = theta_pred - ad.constant(gt_arr, theta_pred.data.dtype)
    return ad.mean(d * d)


def _softplus(z: Tensor) -> Tensor:
    # log(1 + e^z) = relu(z) + log(1 + e^-|z|), overflow-safe
    absz = ad.relu(z) + ad.relu(-z)
    return ad.relu(z) + ad.log(1.0 + ad.exp(-absz))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (targets in {0, 1})."""
    y = ad.constant(np.asarray(targets, dtype=np.float64), logits.data.dtype)
    return ad.mean(_softplus(logits) - logits * y)


def stitch_loss(
    tags: Tensor,
    free_logits: Tensor,
    gt_stitch_pairs: list[tuple[int, int]],
    gt_free_mask: np.ndarray,
    cfg: StitchLossConfig = StitchLossConfig(),
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Contrastive tag loss plus free-edge classification.

    Pull: mean squared tag distance over ground-truth stitched pairs.
    Push: squared hinge max(0, margin - |tag_a - tag_b|)^2 over sampled
    non-stitched, non-free pairs (neg_samples per positive). BCE supervises
    the free-edge logits. Tag rows are indexed in valid-edge slot order.
    """
    m = tags.shape[0]
    free = np.asarray(gt_free_mask, dtype=bool)
    dtype = tags.data.dtype

    if gt_stitch_pairs:
        ia = np.array([p[0] for p in gt_stitch_pairs])
        ib = np.array([p[1] for p in gt_stitch_pairs])
        d = ad.gather(tags, ia, axis=0) - ad.gather(tags, ib, axis=0)
        pull = ad.mean(ad.sum_(d * d, axis=-1))
    else:
        pull = ad.constant(0.0, dtype)

    stitched = {tuple(sorted(p)) for p in gt_stitch_pairs}
    cand = [
        (i, j)
        for i in range(m)
        for j in range(i + 1, m)
        if (i, j) not in stitched and not free[i] and not free[j]
    ]
    n_neg = cfg.neg_samples * max(1, len(gt_stitch_pairs))
    if rng is not None and len(cand) > n_neg:
        chosen = rng.choice(len(cand), size=n_neg, replace=False)
        cand = [cand[int(c)] for c in sorted(chosen)]
    if cand:
        ia = np.array([p[0] for p in cand])
        ib = np.array([p[1] for p in cand])
        d = ad.gather(tags, ia, axis=0) - ad.gather(tags, ib, axis=0)
        dist = ad.sqrt(ad.sum_(d * d, axis=-1) + 1e-12)
        hinge = ad.relu(cfg.margin - dist)
        push = ad.mean(hinge * hinge)
    else:
        push = ad.constant(0.0, dtype)

    bce = bce_with_logits(free_logits, free.astype(np.float64))
    return pull + push + cfg.bce_weight * bce


def padded_rows_loss(pred_edges: Tensor, gt: PatternTensor) -> Tensor:
    """Mean squared norm of predicted rows outside the ground-truth edges.

    Auxiliary term that drives padding rows (and every row of absent
    panels) toward zero so length-based pruning works at inference.
    """
    inv = (~gt.edge_mask).astype(pred_edges.data.dtype)
    count = int(inv.sum())
    if count == 0:
        return ad.constant(0.0, pred_edges.data.dtype)
    sq = ad.sum_(pred_edges * pred_edges, axis=-1)
    return ad.sum_(sq * ad.constant(inv, pred_edges.data.dtype)) * (1.0 / count)


def total_loss(parts: LossParts, w: LossWeights) -> Tensor:
    """lambda1 * (shape + loop + rt) + lambda2 * stitch + lambda3 * pose."""
    return (
        w.lambda1 * (parts.shape + parts.loop + parts.rt)
        + w.lambda2 * parts.stitch
        + w.lambda3 * parts.pose
    )


# ---------------------------------------------------------------------------
# Batched fast path. Numerically the mean of the per-sample losses above
# (up to float summation order); the tests pin the two paths together.

@dataclass
class PanelGroup:
    """All panels of one edge count across a batch, for one vectorized pass."""

    n_edges: int
    flat_panel: np.ndarray   # index into [B*K] panel rows
    sv_gt: np.ndarray        # [G, P, 2] ground-truth support vectors
    weight: np.ndarray       # [G] contribution weights (1 / (panels_i * B))


@dataclass
class StitchBatch:
    pull_a: np.ndarray       # flat edge-row indices into [B*K*E]
    pull_b: np.ndarray
    pull_w: np.ndarray
    push_a: np.ndarray
    push_b: np.ndarray
    push_w: np.ndarray
    bce_rows: np.ndarray
    bce_targets: np.ndarray
    bce_w: np.ndarray


@dataclass
class BatchGroundTruth:
    """Per-step constants assembled from the ground truth of one batch."""

    edges: np.ndarray        # [B, K, E, 4]
    rot: np.ndarray          # [B, K, 4]
    trans: np.ndarray        # [B, K, 3]
    panel_w: np.ndarray      # [B, K] mask / (n_valid_i * B)
    pad_w: np.ndarray        # [B, K, E] inverse mask / (n_pad_i * B)
    groups: list[PanelGroup]
    stitch: StitchBatch
    thetas: np.ndarray       # [B, pose_dim]


def _weighted_sum(values: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_(values * ad.constant(w, values.data.dtype))


def batched_shape_loss(pred_edges: Tensor, groups: list[PanelGroup]) -> Tensor:
    """Grouped support-vector loss over a whole batch.

    pred_edges is [B, K, E, 4]; each group runs one vectorized vertex and
    support-vector construction for all panels sharing an edge count.
    """
    dtype = pred_edges.data.dtype
    b, k, e, _ = pred_edges.shape
    flat = pred_edges.reshape(b * k, e, 4)
    total = ad.constant(0.0, dtype)
    for grp in groups:
        n = grp.n_edges
        rows = ad.gather(flat, grp.flat_panel, axis=0)[:, :n, :]
        g = rows.shape[0]
        inc, strict = _tri(n, dtype)
        dxy = rows[:, :, 0:2]
        ends = ad.matmul(ad.constant(inc, dtype), dxy)
        starts = ad.matmul(ad.constant(strict, dtype), dxy)
        cx = ad.matmul(rows[:, :, 2:3], ad.constant(_ONES_1X2, dtype))
        cy = ad.matmul(rows[:, :, 3:4], ad.constant(_ONES_1X2, dtype))
        perp = ad.matmul(dxy, ad.constant(_PERP, dtype))
        ctrl = starts + cx * dxy + cy * perp
        mids = 0.25 * starts + 0.5 * ctrl + 0.25 * ends
        verts = ad.concat(
            [ends.reshape(g, n, 1, 2), mids.reshape(g, n, 1, 2)], axis=2
        ).reshape(g, 2 * n, 2)
        ia, ib = _pairs(2 * n)
        sv = ad.gather(verts, ib, axis=1) - ad.gather(verts, ia, axis=1)
        d = sv - ad.constant(grp.sv_gt, dtype)
        per_panel = ad.mean(ad.sum_(d * d, axis=-1), axis=1)
        total = total + _weighted_sum(per_panel, grp.weight)
    return total


def batched_loop_loss(pred_edges: Tensor, panel_w: np.ndarray) -> Tensor:
    dxy = pred_edges[:, :, :, 0:2]
    resid = ad.sum_(dxy, axis=2)
    return _weighted_sum(ad.sum_(resid * resid, axis=-1), panel_w)


def batched_rt_loss(pred_rot: Tensor, pred_trans: Tensor, bgt: "BatchGroundTruth") -> Tensor:
    dtype = pred_rot.data.dtype
    dm = pred_rot - ad.constant(bgt.rot, dtype)
    dp = pred_rot + ad.constant(bgt.rot, dtype)
    a = ad.sum_(dm * dm, axis=-1)
    b = ad.sum_(dp * dp, axis=-1)
    rot_term = a - ad.relu(a - b)
    dt = pred_trans - ad.constant(bgt.trans, dtype)
    return _weighted_sum(rot_term + ad.sum_(dt * dt, axis=-1), bgt.panel_w)


def batched_padded_rows_loss(pred_edges: Tensor, pad_w: np.ndarray) -> Tensor:
    return _weighted_sum(ad.sum_(pred_edges * pred_edges, axis=-1), pad_w)


def batched_stitch_loss(tags: Tensor, free_logits: Tensor, sb: StitchBatch,
                        cfg: StitchLossConfig) -> Tensor:
    """Flat-indexed pull/push/BCE over the whole batch.

    tags is [B, K*E, d_tag] and free_logits [B, K*E]; the index arrays in
    sb address their flattened row dimension.
    """
    dtype = tags.data.dtype
    b, rows, d_tag = tags.shape
    flat_tags = tags.reshape(b * rows, d_tag)
    flat_free = free_logits.reshape(b * rows)

    total = ad.constant(0.0, dtype)
    if len(sb.pull_a):
        d = ad.gather(flat_tags, sb.pull_a, axis=0) - ad.gather(flat_tags, sb.pull_b, axis=0)
        total = total + _weighted_sum(ad.sum_(d * d, axis=-1), sb.pull_w)
    if len(sb.push_a):
        d = ad.gather(flat_tags, sb.push_a, axis=0) - ad.gather(flat_tags, sb.push_b, axis=0)
        dist = ad.sqrt(ad.sum_(d * d, axis=-1) + 1e-12)
        hinge = ad.relu(cfg.margin - dist)
        total = total + _weighted_sum(hinge * hinge, sb.push_w)
    if len(sb.bce_rows):
        z = ad.gather(flat_free, sb.bce_rows, axis=0)
        y = ad.constant(sb.bce_targets, dtype)
        vec = _softplus(z) - z * y
        total = total + cfg.bce_weight * _weighted_sum(vec, sb.bce_w)
    return total


# ---------------------------------------------------------------------------
# Test-facing evaluation helpers (plain numpy, no tape)

def _np_vertices(edge_rows: np.ndarray) -> np.ndarray:
    """Numpy twin of panel_vertices_t for ground-truth blocks."""
    rows = np.asarray(edge_rows, dtype=np.float64)
    dxy = rows[:, 0:2]
    ends = np.cumsum(dxy, axis=0)
    starts = ends - dxy
    perp = dxy @ _PERP
    ctrl = starts + rows[:, 2:3] * dxy + rows[:, 3:4] * perp
    mids = 0.25 * starts + 0.5 * ctrl + 0.25 * ends
    out = np.empty((2 * len(rows), 2))
    out[0::2] = ends
    out[1::2] = mids
    return out


def support_loss_unsquared(pred_vertices: np.ndarray, gt_vertices: np.ndarray) -> float:
    """Sum of unsquared L2 errors over all support vectors.

    Evaluation mode used to check the redistribution identity: for two
    edges with endpoint errors dv1 and dv2 the three-term sum
    |dv1| + |dv2| + |dv1 + dv2| equals (1 + cos a1)|dv1| + (1 + cos a2)|dv2|
    with a_i the angle between dv_i and dv1 + dv2.
    """
    pv = np.asarray(pred_vertices, dtype=np.float64)
    gv = np.asarray(gt_vertices, dtype=np.float64)
    if pv.shape != gv.shape:
        raise ShapeMismatch(f"vertex shapes differ: {pv.shape} vs {gv.shape}")
    ia, ib = _pairs(len(pv))
    d = (pv[ib] - pv[ia]) - (gv[ib] - gv[ia])
    return float(np.sqrt((d * d).sum(axis=-1)).sum())
