"""Procedural garment templates and the on-disk dataset builder.

Four parametric templates (two- and four-panel skirts, a tee with curved
necklines and sleeves, four-panel pants) cover 2-6 stitches, straight and
curved edges, and panel counts 2-4. Every emitted numeric is quantized to
six decimals so the canonical 9-significant-digit file format represents
patterns exactly and loop closure survives serialization.

On-disk layout under <out>/<name>/:
    manifest.json      split ids, seeds, template parameter records
    patterns/<id>.json canonical pattern files
    rasters/<id>.bin   magic "SEWRAS1", C,H,W int32 LE, float32 payload
    poses/<id>.bin     72 float32 LE
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    RenderConfig,
    apply_pose,
    quat_from_axis_angle,
    quat_rotate,
    render_raster,
)
from .pattern import (
    Edge,
    Panel,
    SewingPattern,
    Stitch,
    parse_pattern,
    serialize_pattern,
    to_tensor,
    validate,
)

RASTER_MAGIC = b"SEWRAS1"
POSE_DIM = 72

# class slots used by the templates (see pattern.CLASS_NAMES)
TOP_FRONT, TOP_BACK, SLEEVE_L, SLEEVE_R = 0, 1, 2, 3
SKIRT_F, SKIRT_B, SKIRT_L, SKIRT_R = 4, 5, 6, 7
PANT_FL, PANT_FR, PANT_BL, PANT_BR = 8, 9, 10, 11

QUAT_IDENT = (1.0, 0.0, 0.0, 0.0)
QUAT_FLIP_Y = (0.0, 0.0, 1.0, 0.0)  # pi about y


class DatagenError(Exception):
    pass


class DuplicateAfterMaxRetries(DatagenError):
    """The no-repeat constraint could not be satisfied."""


@dataclass(frozen=True)
class PoseVector:
    theta: np.ndarray  # [72] float32

    def as_float64(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=np.float64)


@dataclass(frozen=True)
class TemplateSpec:
    name: str
    param_ranges: dict[str, tuple[float, float]]
    panel_classes: tuple[int, ...]
    stitches: tuple[tuple[tuple[int, int], tuple[int, int]], ...]


def _q6(x: float) -> float:
    return round(float(x), 6)


def _poly_edges(vertices, curves: dict[int, tuple[float, float]] | None = None):
    """Closed edge loop from quantized vertices; exact 6-decimal components.

    Straight edges carry the canonical on-chord control (0.5, 0) so that
    stored parameters, loss targets, and vertex midpoints all agree.
    """
    curves = curves or {}
    edges = []
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        cx, cy = curves.get(i, (0.5, 0.0))
        edges.append(Edge(_q6(x1 - x0), _q6(y1 - y0), _q6(cx), _q6(cy)))
    return tuple(edges)


def _centered(anchor, rotation, vertices) -> tuple[float, float, float]:
    """Translation putting the rotated vertex centroid at the anchor."""
    centroid = np.mean(np.asarray(vertices, dtype=np.float64), axis=0)
    offset = quat_rotate(rotation, (centroid[0], centroid[1], 0.0))
    return tuple(_q6(a - o) for a, o in zip(anchor, offset))


def _trapezoid(half_top: float, half_bot: float, length: float):
    """Symmetric trapezoid, first vertex at the origin, hem along the bottom."""
    return [
        (0.0, 0.0),
        (_q6(2 * half_bot), 0.0),
        (_q6(half_bot + half_top), _q6(length)),
        (_q6(half_bot - half_top), _q6(length)),
    ]


def _panel(class_id, vertices, rotation, anchor, curves=None) -> Panel:
    return Panel(
        class_id=class_id,
        edges=_poly_edges(vertices, curves),
        rotation=rotation,
        translation=_centered(anchor, rotation, vertices),
    )


def _build_skirt2(p: dict[str, float]) -> list[Panel]:
    verts = _trapezoid(p["waist_half"], p["hem_half"], p["length"])
    return [
        _panel(SKIRT_F, verts, QUAT_IDENT, (0.0, -0.35, 0.3)),
        _panel(SKIRT_B, verts, QUAT_FLIP_Y, (0.0, -0.35, -0.3)),
    ]


def _build_skirt4(p: dict[str, float]) -> list[Panel]:
    verts = _trapezoid(_q6(p["waist_half"] / 2), _q6(p["hem_half"] / 2), p["length"])
    q_right = quat_from_axis_angle((0.0, 1.0, 0.0), math.pi / 2)
    q_left = quat_from_axis_angle((0.0, 1.0, 0.0), -math.pi / 2)
    return [
        _panel(SKIRT_F, verts, QUAT_IDENT, (0.0, -0.35, 0.35)),
        _panel(SKIRT_B, verts, QUAT_FLIP_Y, (0.0, -0.35, -0.35)),
        _panel(SKIRT_L, verts, q_left, (-0.35, -0.35, 0.0)),
        _panel(SKIRT_R, verts, q_right, (0.35, -0.35, 0.0)),
    ]


def _tee_body(width, length, shoulder_w, shoulder_h):
    return [
        (0.0, 0.0),
        (_q6(width), 0.0),
        (_q6(width), _q6(length)),
        (_q6(width - shoulder_w), _q6(length + shoulder_h)),
        (_q6(shoulder_w), _q6(length + shoulder_h)),
        (0.0, _q6(length)),
    ]


def _build_tee(p: dict[str, float]) -> list[Panel]:
    w, l = p["body_width"], p["body_length"]
    c, h, s = p["shoulder_width"], p["shoulder_rise"], p["sleeve_length"]
    body = _tee_body(w, l, c, h)
    m = _q6(math.hypot(c, h))  # sleeve edge matches the shoulder chord
    sleeve = [(0.0, 0.0), (m, 0.0), (m, _q6(-s)), (0.0, _q6(-s))]
    q_sl = quat_from_axis_angle((0.0, 0.0, 1.0), math.pi / 2)
    q_sr = quat_from_axis_angle((0.0, 0.0, 1.0), -math.pi / 2)
    return [
        _panel(TOP_FRONT, body, QUAT_IDENT, (0.0, 0.35, 0.3),
               curves={3: (0.5, p["neck_front"])}),
        _panel(TOP_BACK, body, QUAT_FLIP_Y, (0.0, 0.35, -0.3),
               curves={3: (0.5, p["neck_back"])}),
        _panel(SLEEVE_L, sleeve, q_sl, (-0.55, 0.4, 0.1)),
        _panel(SLEEVE_R, sleeve, q_sr, (0.55, 0.4, 0.1)),
    ]


def _build_pants(p: dict[str, float]) -> list[Panel]:
    verts = _trapezoid(p["waist_half"], p["hem_half"], p["leg_length"])
    return [
        _panel(PANT_FL, verts, QUAT_IDENT, (-0.18, -0.55, 0.22)),
        _panel(PANT_FR, verts, QUAT_IDENT, (0.18, -0.55, 0.22)),
        _panel(PANT_BL, verts, QUAT_FLIP_Y, (-0.18, -0.55, -0.22)),
        _panel(PANT_BR, verts, QUAT_FLIP_Y, (0.18, -0.55, -0.22)),
    ]


TEMPLATES: dict[str, TemplateSpec] = {
    "skirt2": TemplateSpec(
        name="skirt2",
        param_ranges={
            "length": (0.5, 1.0),
            "waist_half": (0.15, 0.3),
            "hem_half": (0.3, 0.5),
        },
        panel_classes=(SKIRT_F, SKIRT_B),
        stitches=(
            ((SKIRT_F, 1), (SKIRT_B, 3)),
            ((SKIRT_F, 3), (SKIRT_B, 1)),
        ),
    ),
    "skirt4": TemplateSpec(
        name="skirt4",
        param_ranges={
            "length": (0.5, 1.0),
            "waist_half": (0.15, 0.3),
            "hem_half": (0.3, 0.5),
        },
        panel_classes=(SKIRT_F, SKIRT_B, SKIRT_L, SKIRT_R),
        stitches=(
            ((SKIRT_F, 1), (SKIRT_R, 3)),
            ((SKIRT_R, 1), (SKIRT_B, 3)),
            ((SKIRT_B, 1), (SKIRT_L, 3)),
            ((SKIRT_L, 1), (SKIRT_F, 3)),
        ),
    ),
    "tee": TemplateSpec(
        name="tee",
        param_ranges={
            "body_width": (0.4, 0.6),
            "body_length": (0.4, 0.6),
            "shoulder_width": (0.08, 0.14),
            "shoulder_rise": (0.04, 0.08),
            "neck_front": (0.10, 0.22),
            "neck_back": (0.02, 0.06),
            "sleeve_length": (0.2, 0.45),
        },
        panel_classes=(TOP_FRONT, TOP_BACK, SLEEVE_L, SLEEVE_R),
        stitches=(
            ((TOP_FRONT, 1), (TOP_BACK, 5)),
            ((TOP_FRONT, 5), (TOP_BACK, 1)),
            ((TOP_FRONT, 2), (SLEEVE_R, 0)),
            ((TOP_BACK, 2), (SLEEVE_R, 2)),
            ((TOP_FRONT, 4), (SLEEVE_L, 0)),
            ((TOP_BACK, 4), (SLEEVE_L, 2)),
        ),
    ),
    "pants": TemplateSpec(
        name="pants",
        param_ranges={
            "leg_length": (0.6, 1.0),
            "waist_half": (0.12, 0.2),
            "hem_half": (0.08, 0.16),
        },
        panel_classes=(PANT_FL, PANT_FR, PANT_BL, PANT_BR),
        stitches=(
            ((PANT_FL, 1), (PANT_BL, 3)),
            ((PANT_FL, 3), (PANT_BL, 1)),
            ((PANT_FR, 1), (PANT_BR, 3)),
            ((PANT_FR, 3), (PANT_BR, 1)),
        ),
    ),
}

_BUILDERS = {
    "skirt2": _build_skirt2,
    "skirt4": _build_skirt4,
    "tee": _build_tee,
    "pants": _build_pants,
}


def sample_template_params(spec: TemplateSpec, rng: np.random.Generator) -> dict[str, float]:
    return {k: _q6(rng.uniform(lo, hi)) for k, (lo, hi) in spec.param_ranges.items()}


def build_from_params(spec: TemplateSpec, params: dict[str, float],
                      metadata: dict | None = None) -> SewingPattern:
    """Construct and canonicalize a pattern (round-trips through the file form)."""
    panels = _BUILDERS[spec.name](params)
    stitches = [Stitch(a, b) for a, b in spec.stitches]
    draft = SewingPattern(panels=panels, stitches=stitches, metadata=metadata or {})
    return parse_pattern(serialize_pattern(draft))


def sample_pattern(spec: TemplateSpec | str, rng_seed: int) -> SewingPattern:
    """Uniform parameter draw, closed panels, the template's stitch set."""
    if isinstance(spec, str):
        spec = TEMPLATES[spec]
    rng = np.random.default_rng(rng_seed)
    params = sample_template_params(spec, rng)
    return build_from_params(spec, params, metadata={"template": spec.name, "seed": int(rng_seed)})


def sample_pose(rng_seed: int) -> PoseVector:
    """theta ~ iid uniform[-1, 1]^72, stored at float32 precision."""
    rng = np.random.default_rng(rng_seed)
    return PoseVector(rng.uniform(-1.0, 1.0, POSE_DIM).astype(np.float32))


@dataclass
class DatasetConfig:
    name: str = "toy"
    counts: dict[str, int] = field(default_factory=lambda: {t: 4 for t in TEMPLATES})
    split: float = 0.8
    seed: int = 0
    e_max: int = 8
    num_classes: int = 24
    render: RenderConfig = field(default_factory=RenderConfig)
    max_retries: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "render" in d:
            d["render"] = RenderConfig(**{
                **d["render"],
                **({"view_box": tuple(d["render"]["view_box"])}
                   if "view_box" in d["render"] else {}),
            })
        return cls(**d)


@dataclass
class Manifest:
    name: str
    seed: int
    split: float
    num_classes: int
    e_max: int
    render: dict
    train_ids: list[int]
    test_ids: list[int]
    samples: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "split": self.split,
            "num_classes": self.num_classes,
            "e_max": self.e_max,
            "render": self.render,
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
            "samples": self.samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        return cls(**d)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_raster(path: Path, channels: np.ndarray) -> None:
    c, h, w = channels.shape
    header = RASTER_MAGIC + struct.pack("<3I", c, h, w)
    _atomic_write(path, header + np.ascontiguousarray(channels, dtype="<f4").tobytes())


def load_raster(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[: len(RASTER_MAGIC)] != RASTER_MAGIC:
        raise DatagenError(f"{path}: bad raster magic")
    c, h, w = struct.unpack_from("<3I", blob, len(RASTER_MAGIC))
    payload = np.frombuffer(blob, dtype="<f4", offset=len(RASTER_MAGIC) + 12)
    return payload.reshape(c, h, w).astype(np.float32)


def write_pose(path: Path, theta: np.ndarray) -> None:
    _atomic_write(path, np.ascontiguousarray(theta, dtype="<f4").tobytes())


def load_pose(path) -> np.ndarray:
    arr = np.frombuffer(Path(path).read_bytes(), dtype="<f4").astype(np.float32)
    if arr.shape != (POSE_DIM,):
        raise DatagenError(f"{path}: expected {POSE_DIM} float32, got {arr.shape}")
    return arr


def _dedup_key(template: str, params: dict[str, float], theta: np.ndarray):
    return (
        template,
        tuple(round(params[k], 3) for k in sorted(params)),
        tuple(np.round(np.asarray(theta, dtype=np.float64), 3).tolist()),
    )


def generate_sample(cfg: DatasetConfig, sample_id: int, attempt: int = 0):
    """Deterministic (pattern, pose, params) for one id; independent of order."""
    template_names = []
    for t, c in cfg.counts.items():
        template_names.extend([t] * c)
    spec = TEMPLATES[template_names[sample_id]]
    seq = np.random.SeedSequence(cfg.seed, spawn_key=(sample_id, attempt))
    rng = np.random.default_rng(seq)
    params = sample_template_params(spec, rng)
    theta = rng.uniform(-1.0, 1.0, POSE_DIM).astype(np.float32)
    pattern = build_from_params(
        spec, params, metadata={"template": spec.name, "seed": int(sample_id)}
    )
    return pattern, PoseVector(theta), params


def build_dataset(cfg: DatasetConfig, out_root) -> Manifest:
    """Write patterns, rasters, poses, and the manifest; fully seeded.

    Parameter tuples and poses are quantized to 3 decimals for the
    train/test no-repeat check; collisions trigger a reseeded retry.
    """
    root = Path(out_root) / cfg.name
    for sub in ("patterns", "rasters", "poses"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    render_cfg = RenderConfig(
        num_classes=cfg.num_classes,
        height=cfg.render.height,
        width=cfg.render.width,
        view_box=cfg.render.view_box,
        samples_per_edge=cfg.render.samples_per_edge,
    )

    n_total = sum(cfg.counts.values())
    seen = set()
    samples: dict[str, dict] = {}
    train_ids: list[int] = []
    test_ids: list[int] = []

    offset = 0
    for template, count in cfg.counts.items():
        n_train = int(count * cfg.split + 0.5)
        for local in range(count):
            sid = offset + local
            pattern = pose = params = None
            for attempt in range(cfg.max_retries):
                pattern, pose, params = generate_sample(cfg, sid, attempt)
                key = _dedup_key(template, params, pose.theta)
                if key not in seen:
                    seen.add(key)
                    break
            else:
                raise DuplicateAfterMaxRetries(
                    f"sample {sid}: no unique draw in {cfg.max_retries} attempts"
                )
            report = validate(pattern)
            if not report.passed:
                raise DatagenError(f"sample {sid}: generated pattern failed validation")
            raster = render_raster(pattern, pose.as_float64(), render_cfg)
            _atomic_write(root / "patterns" / f"{sid}.json", serialize_pattern(pattern))
            write_raster(root / "rasters" / f"{sid}.bin", raster.channels)
            write_pose(root / "poses" / f"{sid}.bin", pose.theta)
            samples[str(sid)] = {"template": template, "attempt": attempt, "params": params}
            (train_ids if local < n_train else test_ids).append(sid)
        offset += count

    manifest = Manifest(
        name=cfg.name,
        seed=cfg.seed,
        split=cfg.split,
        num_classes=cfg.num_classes,
        e_max=cfg.e_max,
        render={
            "num_classes": render_cfg.num_classes,
            "height": render_cfg.height,
            "width": render_cfg.width,
            "view_box": list(render_cfg.view_box),
            "samples_per_edge": render_cfg.samples_per_edge,
        },
        train_ids=train_ids,
        test_ids=test_ids,
        samples=samples,
    )
    assert not set(train_ids) & set(test_ids)
    body = json.dumps(manifest.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"
    _atomic_write(root / "manifest.json", body.encode("utf-8"))
    return manifest


def load_manifest(dataset_dir) -> Manifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise DatagenError(f"no manifest at {path}")
    return Manifest.from_dict(json.loads(path.read_text()))


@dataclass
class LoadedSplit:
    ids: list[int]
    rasters: np.ndarray          # [N, C, H, W] float32
    thetas: np.ndarray           # [N, 72] float32
    patterns: list[SewingPattern]
    tensors: list                # PatternTensor per sample
    manifest: Manifest


def load_split(dataset_dir, split: str = "train") -> LoadedSplit:
    mf = load_manifest(dataset_dir)
    ids = mf.train_ids if split == "train" else mf.test_ids
    root = Path(dataset_dir)
    rasters = []
    thetas = []
    patterns = []
    tensors = []
    for sid in ids:
        rasters.append(load_raster(root / "rasters" / f"{sid}.bin"))
        thetas.append(load_pose(root / "poses" / f"{sid}.bin"))
        pattern = parse_pattern((root / "patterns" / f"{sid}.json").read_bytes())
        patterns.append(pattern)
        tensors.append(to_tensor(pattern, mf.e_max, mf.num_classes))
    shape = (len(ids), mf.num_classes, mf.render["height"], mf.render["width"])
    return LoadedSplit(
        ids=list(ids),
        rasters=np.array(rasters, dtype=np.float32).reshape(shape),
        thetas=np.array(thetas, dtype=np.float32).reshape(len(ids), POSE_DIM),
        patterns=patterns,
        tensors=tensors,
        manifest=mf,
    )
