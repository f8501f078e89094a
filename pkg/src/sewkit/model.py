"""Two-level set-prediction transformer over class-channel rasters.

A patch-embedding encoder produces visual tokens; a panel decoder turns
learned per-class queries (plus one pose query) into panel tokens; an edge
decoder fuses per-edge queries with their panel token and yields edge
tokens. Heads read out edge parameters, placement, stitch tags, free-edge
logits, and the pose vector.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tape, Tensor
from .geometry import Raster
from .pattern import EPS_EDGE, SewingPattern, from_tensor, PatternTensor
from .stitcher import DEFAULT_THRESHOLD, greedy_decode, similarity_matrix


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    panel_dec_layers: int = 2
    edge_dec_layers: int = 2
    num_classes: int = 24
    e_max: int = 8
    patch: int = 8
    in_channels: int = 24
    height: int = 64
    width: int = 64
    d_tag: int = 8
    mlp_ratio: int = 4
    pose_dim: int = 72

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("raster size must be divisible by patch")

    @property
    def tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch * self.patch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelOutput:
    edges: Tensor       # [K, E_max, 4]
    rot: Tensor         # [K, 4], unit rows
    trans: Tensor       # [K, 3]
    tags: Tensor        # [K*E_max, d_tag]
    free_logits: Tensor  # [K*E_max]
    theta: Tensor       # [pose_dim]


def _attn_names(prefix: str):
    return [f"{prefix}.{n}" for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def _mlp_names(prefix: str):
    return [f"{prefix}.{n}" for n in ("w1", "b1", "w2", "b2")]


def _ln_names(prefix: str):
    return [f"{prefix}.g", f"{prefix}.b"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in construction order."""
    d, r = cfg.d_model, cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {}

    def attn(prefix):
        for name in _attn_names(prefix):
            shapes[name] = (d,) if name.split(".")[-1].startswith("b") else (d, d)

    def mlp(prefix, hidden, out=d, inp=d):
        shapes[f"{prefix}.w1"] = (inp, hidden)
        shapes[f"{prefix}.b1"] = (hidden,)
        shapes[f"{prefix}.w2"] = (hidden, out)
        shapes[f"{prefix}.b2"] = (out,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    shapes["embed.proj_w"] = (cfg.patch_dim, d)
    shapes["embed.proj_b"] = (d,)
    shapes["embed.pos"] = (cfg.tokens, d)
    for i in range(cfg.enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        mlp(f"enc.{i}.mlp", d * r)
    ln("enc.ln_f")

    shapes["paneldec.queries"] = (cfg.num_classes + 1, d)
    for i in range(cfg.panel_dec_layers):
        ln(f"paneldec.{i}.ln_s")
        attn(f"paneldec.{i}.self")
        ln(f"paneldec.{i}.ln_c")
        attn(f"paneldec.{i}.cross")
        ln(f"paneldec.{i}.ln_m")
        mlp(f"paneldec.{i}.mlp", d * r)
    ln("paneldec.ln_f")

    shapes["edgedec.queries"] = (cfg.num_classes * cfg.e_max, d)
    mlp("edgedec.fuse", d * r)
    for i in range(cfg.edge_dec_layers):
        ln(f"edgedec.{i}.ln_s")
        attn(f"edgedec.{i}.self")
        ln(f"edgedec.{i}.ln_c")
        attn(f"edgedec.{i}.cross")
        ln(f"edgedec.{i}.ln_m")
        mlp(f"edgedec.{i}.mlp", d * r)
    ln("edgedec.ln_f")

    mlp("head.rot", d, out=4)
    mlp("head.trans", d, out=3)
    mlp("head.pose", d, out=cfg.pose_dim)
    mlp("head.edge", d, out=4)
    mlp("head.tag", d, out=cfg.d_tag)
    mlp("head.free", d, out=1)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Seeded initialization: weights/queries normal(0, 0.02), biases zero,
    layernorm gain one."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") and leaf != "b":  # b1/b2/bq/bk/bv/bo
            arr = np.zeros(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        params[name] = arr.astype(dtype)
    return params


def lift_params(params: dict[str, np.ndarray], tape: Tape | None) -> dict[str, Tensor]:
    """Leaf tensors on a tape (training) or constants (inference)."""
    if tape is None:
        return {k: ad.constant(v, v.dtype) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


def patchify(rasters: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """[B, C, H, W] -> [B, tokens, C*patch*patch], row-major patch order."""
    x = np.asarray(rasters)
    if x.ndim == 3:
        x = x[None]
    b, c, h, w = x.shape
    if (c, h, w) != (cfg.in_channels, cfg.height, cfg.width):
        raise ShapeMismatch(
            f"raster shape {(c, h, w)} does not match config "
            f"{(cfg.in_channels, cfg.height, cfg.width)}"
        )
    p = cfg.patch
    x = x.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, cfg.tokens, cfg.patch_dim)


def _heads_split(x: Tensor, b: int, t: int, heads: int, dh: int) -> Tensor:
    return ad.transpose(x.reshape(b, t, heads, dh), (0, 2, 1, 3))


def _attention(p, prefix: str, xq: Tensor, xkv: Tensor, cfg: ModelConfig) -> Tensor:
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    heads = cfg.heads
    dh = d // heads
    q = _heads_split(ad.matmul(xq, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"], b, tq, heads, dh)
    k = _heads_split(ad.matmul(xkv, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"], b, tk, heads, dh)
    v = _heads_split(ad.matmul(xkv, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"], b, tk, heads, dh)
    # scale q up front: cheaper than scaling the [.., tq, tk] score matrix
    scores = ad.matmul(q * (1.0 / np.sqrt(dh)), ad.transpose(k, (0, 1, 3, 2)))
    attn = ad.softmax(scores)
    out = ad.matmul(attn, v)
    out = ad.transpose(out, (0, 2, 1, 3)).reshape(b, tq, d)
    return ad.matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]


def _mlp_block(p, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.matmul(x, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
    return ad.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"]


def _ln(p, prefix: str, x: Tensor) -> Tensor:
    return ad.layernorm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _decoder(p, scope: str, n_layers: int, x: Tensor, memory: Tensor, cfg: ModelConfig) -> Tensor:
    for i in range(n_layers):
        pre = f"{scope}.{i}"
        h = _ln(p, f"{pre}.ln_s", x)
        x = x + _attention(p, f"{pre}.self", h, h, cfg)
        x = x + _attention(p, f"{pre}.cross", _ln(p, f"{pre}.ln_c", x), memory, cfg)
        x = x + _mlp_block(p, f"{pre}.mlp", _ln(p, f"{pre}.ln_m", x))
    return _ln(p, f"{scope}.ln_f", x)


def _batched(t: Tensor, b: int) -> Tensor:
    zeros = ad.constant(np.zeros((b,) + t.shape, dtype=t.data.dtype), t.data.dtype)
    return t + zeros


@dataclass
class BatchOutput:
    edges: Tensor       # [B, K, E_max, 4]
    rot: Tensor         # [B, K, 4]
    trans: Tensor       # [B, K, 3]
    tags: Tensor        # [B, K*E_max, d_tag]
    free_logits: Tensor  # [B, K*E_max]
    theta: Tensor       # [B, pose_dim]


def forward_batch(p: dict[str, Tensor], cfg: ModelConfig, patches: np.ndarray) -> BatchOutput:
    """Run the full pipeline on pre-patchified input [B, tokens, patch_dim]."""
    b = patches.shape[0]
    k, e_max, d = cfg.num_classes, cfg.e_max, cfg.d_model
    dtype = p["embed.proj_w"].data.dtype
    x = ad.constant(patches, dtype)

    tok = ad.matmul(x, p["embed.proj_w"]) + p["embed.proj_b"] + p["embed.pos"]
    for i in range(cfg.enc_layers):
        pre = f"enc.{i}"
        h = _ln(p, f"{pre}.ln1", tok)
        tok = tok + _attention(p, f"{pre}.attn", h, h, cfg)
        tok = tok + _mlp_block(p, f"{pre}.mlp", _ln(p, f"{pre}.ln2", tok))
    fvis = _ln(p, "enc.ln_f", tok)

    pq = _batched(p["paneldec.queries"], b)
    panel_out = _decoder(p, "paneldec", cfg.panel_dec_layers, pq, fvis, cfg)
    fp = panel_out[:, :k, :]
    pose_tok = panel_out[:, k, :]

    rot = ad.l2_normalize(_mlp_block(p, "head.rot", fp))
    trans = _mlp_block(p, "head.trans", fp)
    theta = _mlp_block(p, "head.pose", pose_tok)

    eq = _batched(p["edgedec.queries"], b)
    panel_of_edge = np.repeat(np.arange(k), e_max)
    fused = _mlp_block(p, "edgedec.fuse", eq + ad.gather(fp, panel_of_edge, axis=1))
    fe = _decoder(p, "edgedec", cfg.edge_dec_layers, fused, fvis, cfg)

    edges = _mlp_block(p, "head.edge", fe).reshape(b, k, e_max, 4)
    tags = _mlp_block(p, "head.tag", fe)
    free_logits = _mlp_block(p, "head.free", fe).reshape(b, k * e_max)
    return BatchOutput(edges, rot, trans, tags, free_logits, theta)


def forward(p: dict[str, Tensor], cfg: ModelConfig, raster: Raster | np.ndarray) -> ModelOutput:
    """Single-sample forward. Output shapes follow the per-slot layout."""
    channels = raster.channels if isinstance(raster, Raster) else np.asarray(raster)
    out = forward_batch(p, cfg, patchify(channels, cfg))
    return ModelOutput(
        edges=out.edges[0],
        rot=out.rot[0],
        trans=out.trans[0],
        tags=out.tags[0],
        free_logits=out.free_logits[0],
        theta=out.theta[0],
    )


def predict(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    raster: Raster | np.ndarray,
    eps_edge: float = EPS_EDGE,
    stitch_threshold: float = DEFAULT_THRESHOLD,
) -> SewingPattern:
    """Forward pass, pruning, and stitch decoding into a pattern.

    Edges no longer than eps_edge are dropped, panels keep >= 3 edges, and
    stitches are decoded over the surviving, non-free edges only.
    """
    out = forward(lift_params(params, None), cfg, raster)
    edges = np.asarray(out.edges.data, dtype=np.float64)
    rot = np.asarray(out.rot.data, dtype=np.float64)
    trans = np.asarray(out.trans.data, dtype=np.float64)
    tags = np.asarray(out.tags.data, dtype=np.float64)
    free_logits = np.asarray(out.free_logits.data, dtype=np.float64)

    tensor = PatternTensor(
        edges=edges,
        rot=rot,
        trans=trans,
        panel_mask=np.zeros(cfg.num_classes, dtype=bool),
        edge_mask=np.zeros((cfg.num_classes, cfg.e_max), dtype=bool),
    )
    pattern = from_tensor(tensor, eps_edge)

    lengths = np.linalg.norm(edges[:, :, 0:2], axis=2)
    rows = []        # flat model row per surviving edge
    edge_ids = []    # (slot, renumbered index within the pruned panel)
    for panel in pattern.panels:
        k = panel.class_id
        kept = [j for j in range(cfg.e_max) if lengths[k, j] > eps_edge]
        for new_idx, j in enumerate(kept):
            rows.append(k * cfg.e_max + j)
            edge_ids.append((k, new_idx))
    if rows:
        free = 1.0 / (1.0 + np.exp(-free_logits[rows])) > 0.5
        sim = similarity_matrix(tags[rows], edge_ids)
        stitches = greedy_decode(sim, free, stitch_threshold)
    else:
        stitches = []
    return SewingPattern(panels=pattern.panels, stitches=stitches, metadata={})
