"""Optimization loop, checkpointing, logging, and evaluation driving.

Single-threaded reference mode: with a fixed config and seed every run
produces byte-identical checkpoints. Parameters split into two AdamW
groups, the patch-embedding group at its own (lower) learning rate.

Loss evaluation uses the batched fast path in the losses module; the
ground-truth constants for each batch are assembled from per-sample
metadata precomputed at load time.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import losses as L
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import LoadedSplit, load_manifest, load_split
from .losses import BatchGroundTruth, PanelGroup, StitchBatch
from .metrics import MetricsReport, evaluate
from .model import ModelConfig, forward_batch, init_params, lift_params, patchify, predict
from .pattern import PatternTensor, SewingPattern


class TrainerError(Exception):
    pass


class DatasetMissing(TrainerError):
    pass


class NonFiniteLoss(TrainerError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "dataset/toy"
    out_dir: str = "runs/default"
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    lr_transformer: float = 1e-4
    lr_embed: float = 1e-5
    weight_decay: float = 1e-4
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    stitch: L.StitchLossConfig = field(default_factory=L.StitchLossConfig)
    aux_weight: float = 0.1
    grad_clip: float = 1.0
    eval_every: int = 0
    checkpoint_every: int = 0
    augment: bool = False
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "loss_weights" in d:
            lw = d["loss_weights"]
            d["loss_weights"] = (
                L.LossWeights(*lw) if isinstance(lw, (list, tuple)) else L.LossWeights(**lw)
            )
        if "stitch" in d:
            d["stitch"] = L.StitchLossConfig(**d["stitch"])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SampleMeta:
    """Ground-truth bookkeeping for one sample, precomputed at load."""

    rows: np.ndarray                     # flat K*E row per valid edge, slot order
    pairs_flat: list[tuple[int, int]]    # stitched pairs as flat K*E rows
    cand_flat: list[tuple[int, int]]     # non-stitched, non-free pairs, flat rows
    free_targets: np.ndarray             # float 0/1 per valid edge
    panel_w: np.ndarray                  # [K] panel_mask / n_valid_panels
    pad_w: np.ndarray                    # [K, E] inverse edge mask / n_padded
    shape_panels: list[tuple[int, int, np.ndarray]]  # (n_edges, slot, sv_gt)


def build_sample_meta(pattern: SewingPattern, gt: PatternTensor, e_max: int) -> SampleMeta:
    index_of: dict[tuple[int, int], int] = {}
    rows = []
    for k in np.flatnonzero(gt.panel_mask):
        for j in range(int(gt.edge_mask[k].sum())):
            index_of[(int(k), j)] = len(rows)
            rows.append(int(k) * e_max + j)
    rows = np.array(rows, dtype=np.int64)
    m = len(rows)

    pairs = [(index_of[s.first], index_of[s.second]) for s in pattern.stitches]
    free = np.ones(m, dtype=bool)
    for a, b in pairs:
        free[a] = False
        free[b] = False
    stitched = {tuple(sorted(p)) for p in pairs}
    cand = [
        (i, j)
        for i in range(m)
        for j in range(i + 1, m)
        if (i, j) not in stitched and not free[i] and not free[j]
    ]

    n_valid = int(gt.panel_mask.sum())
    panel_w = gt.panel_mask.astype(np.float64) / max(n_valid, 1)
    inv = (~gt.edge_mask).astype(np.float64)
    pad_w = inv / max(int(inv.sum()), 1)

    shape_panels = []
    ia_ib = {}
    for k in np.flatnonzero(gt.panel_mask):
        n_k = int(gt.edge_mask[k].sum())
        verts = L._np_vertices(gt.edges[k, :n_k, :])
        if 2 * n_k not in ia_ib:
            ia_ib[2 * n_k] = np.triu_indices(2 * n_k, k=1)
        ia, ib = ia_ib[2 * n_k]
        shape_panels.append((n_k, int(k), verts[ib] - verts[ia]))

    return SampleMeta(
        rows=rows,
        pairs_flat=[(int(rows[a]), int(rows[b])) for a, b in pairs],
        cand_flat=[(int(rows[a]), int(rows[b])) for a, b in cand],
        free_targets=free.astype(np.float64),
        panel_w=panel_w,
        pad_w=pad_w,
        shape_panels=shape_panels,
    )


def make_batch_gt(
    batch_idx: np.ndarray,
    data: LoadedSplit,
    metas: list[SampleMeta],
    stitch_cfg: L.StitchLossConfig,
    pose_dim: int,
    rng: np.random.Generator | None,
) -> BatchGroundTruth:
    """Assemble the per-step ground-truth constants for one batch."""
    b = len(batch_idx)
    k = data.tensors[0].num_classes
    e = data.tensors[0].e_max
    edges = np.stack([data.tensors[i].edges for i in batch_idx])
    rot = np.stack([data.tensors[i].rot for i in batch_idx])
    trans = np.stack([data.tensors[i].trans for i in batch_idx])
    panel_w = np.stack([metas[i].panel_w for i in batch_idx]) / b
    pad_w = np.stack([metas[i].pad_w for i in batch_idx]) / b

    by_n: dict[int, list] = {}
    pull_a, pull_b, pull_w = [], [], []
    push_a, push_b, push_w = [], [], []
    bce_rows, bce_targets, bce_w = [], [], []
    for pos, i in enumerate(batch_idx):
        meta = metas[i]
        row_off = pos * k * e
        panel_off = pos * k
        n_panels = len(meta.shape_panels)
        for n_k, slot, sv_gt in meta.shape_panels:
            by_n.setdefault(n_k, []).append((panel_off + slot, sv_gt, 1.0 / (n_panels * b)))

        n_pos = len(meta.pairs_flat)
        if n_pos:
            w = 1.0 / (n_pos * b)
            for fa, fb in meta.pairs_flat:
                pull_a.append(row_off + fa)
                pull_b.append(row_off + fb)
                pull_w.append(w)
        cand = meta.cand_flat
        n_neg = stitch_cfg.neg_samples * max(1, n_pos)
        if rng is not None and len(cand) > n_neg:
            chosen = rng.choice(len(cand), size=n_neg, replace=False)
            cand = [cand[int(c)] for c in sorted(chosen)]
        if cand:
            w = 1.0 / (len(cand) * b)
            for fa, fb in cand:
                push_a.append(row_off + fa)
                push_b.append(row_off + fb)
                push_w.append(w)
        if len(meta.rows):
            w = 1.0 / (len(meta.rows) * b)
            bce_rows.extend(row_off + meta.rows)
            bce_targets.extend(meta.free_targets)
            bce_w.extend([w] * len(meta.rows))

    groups = []
    for n_k in sorted(by_n):
        entries = by_n[n_k]
        groups.append(
            PanelGroup(
                n_edges=n_k,
                flat_panel=np.array([x[0] for x in entries], dtype=np.int64),
                sv_gt=np.stack([x[1] for x in entries]),
                weight=np.array([x[2] for x in entries]),
            )
        )

    stitch = StitchBatch(
        pull_a=np.array(pull_a, dtype=np.int64),
        pull_b=np.array(pull_b, dtype=np.int64),
        pull_w=np.array(pull_w),
        push_a=np.array(push_a, dtype=np.int64),
        push_b=np.array(push_b, dtype=np.int64),
        push_w=np.array(push_w),
        bce_rows=np.array(bce_rows, dtype=np.int64),
        bce_targets=np.array(bce_targets),
        bce_w=np.array(bce_w),
    )
    return BatchGroundTruth(
        edges=edges,
        rot=rot,
        trans=trans,
        panel_w=panel_w,
        pad_w=pad_w,
        groups=groups,
        stitch=stitch,
        thetas=data.thetas[batch_idx, :pose_dim].astype(np.float64),
    )


class AdamW:
    """Decoupled weight decay Adam; the decay is scaled by the group lr."""

    def __init__(self, params: dict[str, np.ndarray], lr_of, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr_of = lr_of
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            lr = self.lr_of(name)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p
            p -= (lr * update).astype(p.dtype)


def _augment_raster(raster: np.ndarray, angle: float, shift: np.ndarray) -> np.ndarray:
    out = ndimage.rotate(raster, angle, axes=(2, 1), reshape=False, order=1, mode="constant")
    out = np.roll(out, (int(shift[0]), int(shift[1])), axis=(1, 2))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def compute_batch_loss(out, bgt: BatchGroundTruth, cfg: TrainConfig):
    """Total loss plus its logged components for one batch of outputs."""
    parts = L.LossParts(
        shape=L.batched_shape_loss(out.edges, bgt.groups),
        loop=L.batched_loop_loss(out.edges, bgt.panel_w),
        rt=L.batched_rt_loss(out.rot, out.trans, bgt),
        stitch=L.batched_stitch_loss(out.tags, out.free_logits, bgt.stitch, cfg.stitch),
        pose=L.pose_loss(out.theta, bgt.thetas),
    )
    aux = L.batched_padded_rows_loss(out.edges, bgt.pad_w)
    total = L.total_loss(parts, cfg.loss_weights) + cfg.aux_weight * aux
    return total, parts, aux


@dataclass
class TrainResult:
    final_checkpoint: str
    log_path: str
    steps: int


def train(cfg: TrainConfig) -> TrainResult:
    """Run AdamW over the training split; write checkpoints and a JSONL log."""
    dataset_dir = Path(cfg.dataset)
    try:
        manifest = load_manifest(dataset_dir)
    except Exception as exc:
        raise DatasetMissing(f"cannot load dataset at {dataset_dir}: {exc}") from None
    mc = cfg.model
    if (manifest.num_classes, manifest.e_max) != (mc.num_classes, mc.e_max):
        raise TrainerError(
            f"dataset slots ({manifest.num_classes}, {manifest.e_max}) do not match "
            f"model config ({mc.num_classes}, {mc.e_max})"
        )
    if (manifest.render["height"], manifest.render["width"]) != (mc.height, mc.width):
        raise TrainerError("dataset raster size does not match model config")
    data = load_split(dataset_dir, "train")
    if not data.ids:
        raise DatasetMissing(f"{dataset_dir}: empty training split")
    metas = [
        build_sample_meta(p, t, mc.e_max) for p, t in zip(data.patterns, data.tensors)
    ]

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    params = {k: v.astype(dtype) for k, v in init_params(mc, cfg.seed).items()}

    def lr_of(name: str) -> float:
        return cfg.lr_embed if name.startswith("embed.") else cfg.lr_transformer

    opt = AdamW(params, lr_of, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    n = len(data.ids)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0

    log_path = out_dir / "train_log.jsonl"
    t0 = time.perf_counter()
    ckpt_cfg = {"model": mc.to_dict(), "train_seed": cfg.seed}

    def save(path: Path) -> None:
        save_checkpoint(path, params, ckpt_cfg)

    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            if pos + bs > n:
                order = rng.permutation(n)
                pos = 0
            batch = np.sort(order[pos: pos + bs])
            pos += bs

            rasters = data.rasters[batch]
            if cfg.augment:
                angles = rng.uniform(-10.0, 10.0, size=bs)
                shifts = rng.integers(-2, 3, size=(bs, 2))
                rasters = np.stack(
                    [_augment_raster(r, a, sh) for r, a, sh in zip(rasters, angles, shifts)]
                )

            bgt = make_batch_gt(batch, data, metas, cfg.stitch, mc.pose_dim, rng)
            tape = Tape(dtype=dtype)
            leaves = lift_params(params, tape)
            out = forward_batch(leaves, mc, patchify(rasters, mc).astype(dtype))
            total, parts, aux = compute_batch_loss(out, bgt, cfg)
            if not np.isfinite(total.data):
                raise NonFiniteLoss(f"non-finite loss at step {step}")
            grads = tape.backward(total)
            gmap = {k: grads[leaves[k].node_id] for k in params}

            norm = float(np.sqrt(sum(float((g * g).sum()) for g in gmap.values())))
            if cfg.grad_clip > 0 and norm > cfg.grad_clip:
                scale = cfg.grad_clip / (norm + 1e-12)
                gmap = {k: g * scale for k, g in gmap.items()}
            opt.step(gmap)

            record = {
                "step": step,
                "shape": float(parts.shape.data),
                "loop": float(parts.loop.data),
                "rt": float(parts.rt.data),
                "stitch": float(parts.stitch.data),
                "pose": float(parts.pose.data),
                "aux": float(aux.data),
                "total": float(total.data),
                "grad_norm": norm,
                "wall_time": time.perf_counter() - t0,
            }
            log.write(json.dumps(record) + "\n")

            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
                save(out_dir / f"ckpt_step{done}.sewckpt")
            if cfg.eval_every and done % cfg.eval_every == 0 and done < cfg.steps:
                split = "test" if manifest.test_ids else "train"
                report = _eval_params(params, mc, dataset_dir, split)
                log.write(json.dumps({"step": step, "eval": report.to_dict()}) + "\n")

    final = out_dir / "ckpt_final.sewckpt"
    save(final)
    return TrainResult(str(final), str(log_path), cfg.steps)


def _eval_params(
    params: dict[str, np.ndarray],
    mc: ModelConfig,
    dataset_dir,
    split: str,
) -> MetricsReport:
    data = load_split(dataset_dir, split)
    preds = [predict(params, mc, raster) for raster in data.rasters]
    return evaluate(preds, data.patterns)


def eval_checkpoint(ckpt_path, dataset_dir, split: str = "test") -> MetricsReport:
    """Predict every sample in the split with a saved model and score it."""
    params, meta = load_checkpoint(ckpt_path)
    if not meta or "model" not in meta:
        raise TrainerError(f"{ckpt_path}: checkpoint carries no model config")
    mc = ModelConfig.from_dict(meta["model"])
    if not (Path(dataset_dir) / "manifest.json").exists():
        raise DatasetMissing(f"no dataset at {dataset_dir}")
    return _eval_params(params, mc, dataset_dir, split)
