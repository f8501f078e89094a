"""Sewing-pattern data model, canonical file format, and tensor conversion.

A pattern is a set of 2D panels, each a closed loop of quadratic Bezier
edges with a 3D placement (unit quaternion + translation), plus a set of
stitches pairing edges of (usually different) panels. Panels are assigned
to one of ``NUM_CLASSES`` fixed semantic class slots; the padded tensor
view is aligned to those slots.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

NUM_CLASSES = 24
DEFAULT_E_MAX = 8
EPS_EDGE = 1e-2
EPS_LOOP = 1e-6
QUAT_TOL = 1e-6

# Semantic panel class slots. Templates use a subset; the rest are reserved
# so the slot count matches the model's query budget.
CLASS_NAMES = (
    "top_front", "top_back", "sleeve_left", "sleeve_right",
    "skirt_front", "skirt_back", "skirt_left", "skirt_right",
    "pant_front_left", "pant_front_right", "pant_back_left", "pant_back_right",
    "collar", "cuff_left", "cuff_right", "hood",
    "pocket_left", "pocket_right", "waistband_front", "waistband_back",
    "dress_front", "dress_back", "belt", "apron",
)
assert len(CLASS_NAMES) == NUM_CLASSES


class PatternError(Exception):
    """Base class for pattern file / structure errors."""


class MalformedFile(PatternError):
    """Input bytes are not syntactically valid."""


class SchemaViolation(PatternError):
    """A required field is missing or has the wrong type."""


class InvariantViolation(PatternError):
    """The document is well-formed but violates a structural rule."""


class CapacityExceeded(PatternError):
    """A panel has more edges than the tensor can hold."""


@dataclass(frozen=True)
class Edge:
    """One quadratic Bezier edge.

    (dx, dy) is the start-to-end vector. (cx, cy) locate the control point
    in the edge-local frame: cx along the chord, cy along the CCW
    perpendicular. (0, 0) means a geometrically straight edge.
    """

    dx: float
    dy: float
    cx: float = 0.0
    cy: float = 0.0

    def length(self) -> float:
        return math.hypot(self.dx, self.dy)

    def is_valid(self, eps_edge: float = EPS_EDGE) -> bool:
        return self.length() > eps_edge

    def params(self) -> tuple[float, float, float, float]:
        return (self.dx, self.dy, self.cx, self.cy)


@dataclass(frozen=True)
class Panel:
    """A closed loop of edges with its 3D placement.

    ``class_id`` indexes the semantic slot; ``rotation`` is a unit
    quaternion (w, x, y, z); ``translation`` is a world-frame offset.
    """

    class_id: int
    edges: tuple[Edge, ...]
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def loop_residual(self) -> tuple[float, float]:
        return (sum(e.dx for e in self.edges), sum(e.dy for e in self.edges))

    def quat_norm_error(self) -> float:
        return abs(math.sqrt(sum(q * q for q in self.rotation)) - 1.0)


@dataclass(frozen=True, order=True)
class Stitch:
    """An unordered pair of (panel_slot, edge_index) references.

    Stored canonically with ``first < second`` lexicographically.
    """

    first: tuple[int, int]
    second: tuple[int, int]

    def __post_init__(self):
        if self.first == self.second:
            raise InvariantViolation(f"stitch joins an edge to itself: {self.first}")
        if self.second < self.first:
            a, b = self.second, self.first
            object.__setattr__(self, "first", a)
            object.__setattr__(self, "second", b)

    def endpoints(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return (self.first, self.second)


@dataclass
class SewingPattern:
    """Panels plus stitch topology. Stitches are kept sorted canonically."""

    panels: list[Panel] = field(default_factory=list)
    stitches: list[Stitch] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stitches = sorted(self.stitches)

    def panel_by_class(self, class_id: int) -> Panel | None:
        for p in self.panels:
            if p.class_id == class_id:
                return p
        return None

    def class_ids(self) -> set[int]:
        return {p.class_id for p in self.panels}


@dataclass(eq=False)
class PatternTensor:
    """Zero-padded, class-slot-aligned numeric view of a pattern.

    Masked-out entries are exactly zero; ``edge_mask[k]`` has at least
    three set bits wherever ``panel_mask[k]`` is set.
    """

    edges: np.ndarray       # [K, E_max, 4] float64
    rot: np.ndarray         # [K, 4]
    trans: np.ndarray       # [K, 3]
    panel_mask: np.ndarray  # [K] bool
    edge_mask: np.ndarray   # [K, E_max] bool

    @property
    def num_classes(self) -> int:
        return self.edges.shape[0]

    @property
    def e_max(self) -> int:
        return self.edges.shape[1]

    def edge_counts(self) -> np.ndarray:
        return self.edge_mask.sum(axis=1)


# ---------------------------------------------------------------------------
# Canonical serialization

def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise InvariantViolation(f"non-finite value {x!r} cannot be serialized")
    return format(float(x), ".9g")


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return _fmt_float(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    raise InvariantViolation(f"unsupported metadata value type {type(v).__name__}")


def serialize_pattern(p: SewingPattern) -> bytes:
    """Emit the canonical byte form of a pattern.

    Canonical means: keys sorted, floats at 9 significant digits, stitches
    sorted lexicographically, compact separators, trailing newline.
    parse_pattern(serialize_pattern(p)) reproduces p exactly whenever the
    float fields survive 9-significant-digit formatting (the generator
    guarantees this by construction).
    """
    parts = ["{"]
    meta_items = sorted(p.metadata.items())
    parts.append('"metadata":{')
    parts.append(",".join(f"{json.dumps(k)}:{_fmt_value(v)}" for k, v in meta_items))
    parts.append('},"panels":[')
    panel_strs = []
    for panel in p.panels:
        edges = ",".join(
            "[" + ",".join(_fmt_float(x) for x in e.params()) + "]" for e in panel.edges
        )
        rot = ",".join(_fmt_float(x) for x in panel.rotation)
        trans = ",".join(_fmt_float(x) for x in panel.translation)
        panel_strs.append(
            f'{{"class_id":{panel.class_id},"edges":[{edges}],'
            f'"rotation":[{rot}],"translation":[{trans}]}}'
        )
    parts.append(",".join(panel_strs))
    parts.append('],"stitches":[')
    stitch_strs = [
        f"[[{s.first[0]},{s.first[1]}],[{s.second[0]},{s.second[1]}]]"
        for s in sorted(p.stitches)
    ]
    parts.append(",".join(stitch_strs))
    parts.append('],"version":1}')
    return ("".join(parts) + "\n").encode("utf-8")


def _want(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise SchemaViolation(f"{path}.{key}: missing")
    v = obj[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaViolation(f"{path}.{key}: expected number, got {type(v).__name__}")
        return float(v)
    if not isinstance(v, kind):
        raise SchemaViolation(f"{path}.{key}: expected {kind.__name__}, got {type(v).__name__}")
    return v


def _num_list(v, n: int, path: str) -> list[float]:
    if not isinstance(v, list) or len(v) != n:
        raise SchemaViolation(f"{path}: expected list of {n} numbers")
    out = []
    for i, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaViolation(f"{path}[{i}]: expected number, got {type(x).__name__}")
        if math.isnan(x) or math.isinf(x):
            raise InvariantViolation(f"{path}[{i}]: non-finite value")
        out.append(float(x))
    return out


def parse_pattern(data: bytes, eps_edge: float = EPS_EDGE) -> SewingPattern:
    """Parse and structurally validate a pattern document.

    Raises MalformedFile on broken syntax, SchemaViolation on missing or
    mistyped fields, InvariantViolation on semantic rule breaks; each error
    message names the offending path.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFile(f"not a valid pattern document: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaViolation("$: expected a JSON object at top level")
    version = _want(doc, "version", int, "$")
    if version != 1:
        raise SchemaViolation(f"$.version: unsupported version {version}")
    panels_raw = _want(doc, "panels", list, "$")
    stitches_raw = _want(doc, "stitches", list, "$")
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict):
        raise SchemaViolation("$.metadata: expected object")

    panels: list[Panel] = []
    seen_classes: set[int] = set()
    for i, praw in enumerate(panels_raw):
        path = f"$.panels[{i}]"
        if not isinstance(praw, dict):
            raise SchemaViolation(f"{path}: expected object")
        class_id = _want(praw, "class_id", int, path)
        if isinstance(class_id, bool) or class_id < 0:
            raise InvariantViolation(f"{path}.class_id: must be a nonnegative integer")
        if class_id in seen_classes:
            raise InvariantViolation(f"{path}.class_id: duplicate class {class_id}")
        seen_classes.add(class_id)
        edges_raw = _want(praw, "edges", list, path)
        edges = tuple(
            Edge(*_num_list(e, 4, f"{path}.edges[{j}]")) for j, e in enumerate(edges_raw)
        )
        n_valid = sum(1 for e in edges if e.is_valid(eps_edge))
        if n_valid < 3:
            raise InvariantViolation(
                f"{path}: panel has {n_valid} valid edges, needs at least 3"
            )
        rotation = tuple(_num_list(_want(praw, "rotation", list, path), 4, f"{path}.rotation"))
        translation = tuple(
            _num_list(_want(praw, "translation", list, path), 3, f"{path}.translation")
        )
        panel = Panel(class_id, edges, rotation, translation)
        if panel.quat_norm_error() > QUAT_TOL:
            raise InvariantViolation(
                f"{path}.rotation: quaternion norm off unit by {panel.quat_norm_error():.3g}"
            )
        panels.append(panel)

    by_class = {p.class_id: p for p in panels}
    stitches: list[Stitch] = []
    used: dict[tuple[int, int], int] = {}
    for i, sraw in enumerate(stitches_raw):
        path = f"$.stitches[{i}]"
        if not isinstance(sraw, list) or len(sraw) != 2:
            raise SchemaViolation(f"{path}: expected a pair of [panel, edge] refs")
        ends = []
        for j, ref in enumerate(sraw):
            if (
                not isinstance(ref, list) or len(ref) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in ref)
            ):
                raise SchemaViolation(f"{path}[{j}]: expected [panel_slot, edge_index] ints")
            slot, eidx = ref
            if slot not in by_class:
                raise InvariantViolation(f"{path}[{j}]: no panel with class {slot}")
            if not 0 <= eidx < len(by_class[slot].edges):
                raise InvariantViolation(
                    f"{path}[{j}]: edge {eidx} out of range for panel {slot} "
                    f"({len(by_class[slot].edges)} edges)"
                )
            ends.append((slot, eidx))
        if ends[0] == ends[1]:
            raise InvariantViolation(f"{path}: stitch joins an edge to itself")
        for end in ends:
            if end in used:
                raise InvariantViolation(
                    f"{path}: endpoint {end} already used by stitch {used[end]}"
                )
            used[end] = i
        stitches.append(Stitch(ends[0], ends[1]))

    return SewingPattern(panels=panels, stitches=stitches, metadata=dict(metadata))


# ---------------------------------------------------------------------------
# Tensor conversion

def to_tensor(
    p: SewingPattern,
    e_max: int = DEFAULT_E_MAX,
    num_classes: int = NUM_CLASSES,
) -> PatternTensor:
    """Pack a pattern into the zero-padded class-slot tensor layout."""
    edges = np.zeros((num_classes, e_max, 4), dtype=np.float64)
    rot = np.zeros((num_classes, 4), dtype=np.float64)
    trans = np.zeros((num_classes, 3), dtype=np.float64)
    panel_mask = np.zeros(num_classes, dtype=bool)
    edge_mask = np.zeros((num_classes, e_max), dtype=bool)
    for panel in p.panels:
        k = panel.class_id
        if k >= num_classes:
            raise InvariantViolation(
                f"panel class {k} out of range for {num_classes} slots"
            )
        if len(panel.edges) > e_max:
            raise CapacityExceeded(
                f"panel class {k} has {len(panel.edges)} edges, capacity {e_max}"
            )
        for j, e in enumerate(panel.edges):
            edges[k, j] = e.params()
            edge_mask[k, j] = True
        rot[k] = panel.rotation
        trans[k] = panel.translation
        panel_mask[k] = True
    return PatternTensor(edges, rot, trans, panel_mask, edge_mask)


def from_tensor(t: PatternTensor, eps_edge: float = EPS_EDGE) -> SewingPattern:
    """Read a pattern back out of raw tensor values, pruning invalid parts.

    Masks are ignored: this is the inference path for raw model output.
    Edges no longer than eps_edge are dropped, then slots with fewer than
    three surviving edges. Quaternions are renormalized (zero rows fall
    back to identity). The result carries no stitches.
    """
    panels = []
    for k in range(t.num_classes):
        rows = [Edge(*t.edges[k, j].tolist()) for j in range(t.e_max)]
        kept = [e for e in rows if e.is_valid(eps_edge)]
        if len(kept) < 3:
            continue
        q = np.asarray(t.rot[k], dtype=np.float64)
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            quat = (1.0, 0.0, 0.0, 0.0)
        elif abs(norm - 1.0) > QUAT_TOL:
            quat = tuple((q / norm).tolist())
        else:
            quat = tuple(q.tolist())
        panels.append(
            Panel(
                class_id=k,
                edges=tuple(kept),
                rotation=quat,
                translation=tuple(np.asarray(t.trans[k], dtype=np.float64).tolist()),
            )
        )
    return SewingPattern(panels=panels, stitches=[], metadata={})


def surviving_edges(
    edges: np.ndarray, eps_edge: float = EPS_EDGE
) -> list[tuple[int, int]]:
    """(slot, row) indices that survive from_tensor pruning, in slot order.

    Shares the pruning rule with from_tensor so stitch decoding can map
    model rows onto the pruned pattern's renumbered edge indices.
    """
    lengths = np.linalg.norm(edges[:, :, 0:2], axis=2)
    out = []
    for k in range(edges.shape[0]):
        rows = [j for j in range(edges.shape[1]) if lengths[k, j] > eps_edge]
        if len(rows) >= 3:
            out.extend((k, j) for j in rows)
    return out


# ---------------------------------------------------------------------------
# Validation

@dataclass
class ValidationConfig:
    eps_edge: float = EPS_EDGE
    eps_loop: float = EPS_LOOP
    quat_tol: float = QUAT_TOL


@dataclass
class PanelReport:
    class_id: int
    n_edges: int
    n_valid_edges: int
    loop_residual: float
    quat_norm_error: float
    ok: bool


@dataclass
class ValidationReport:
    panels: list[PanelReport]
    stitch_errors: list[str]
    passed: bool

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "panels": [vars(p) for p in self.panels],
            "stitch_errors": list(self.stitch_errors),
        }


def validate(p: SewingPattern, cfg: ValidationConfig | None = None) -> ValidationReport:
    """Report loop closure, edge counts, quaternion norms, stitch uniqueness."""
    cfg = cfg or ValidationConfig()
    panel_reports = []
    ok_all = True
    for panel in p.panels:
        rx, ry = panel.loop_residual()
        residual = math.hypot(rx, ry)
        n_valid = sum(1 for e in panel.edges if e.is_valid(cfg.eps_edge))
        qerr = panel.quat_norm_error()
        ok = residual <= cfg.eps_loop and n_valid >= 3 and qerr <= cfg.quat_tol
        ok_all = ok_all and ok
        panel_reports.append(
            PanelReport(panel.class_id, len(panel.edges), n_valid, residual, qerr, ok)
        )
    seen: dict[tuple[int, int], int] = {}
    stitch_errors = []
    by_class = {panel.class_id: panel for panel in p.panels}
    for i, s in enumerate(p.stitches):
        for end in s.endpoints():
            slot, eidx = end
            if slot not in by_class or not 0 <= eidx < len(by_class[slot].edges):
                stitch_errors.append(f"stitch {i}: endpoint {end} references a missing edge")
            elif end in seen:
                stitch_errors.append(
                    f"stitch {i}: endpoint {end} already used by stitch {seen[end]}"
                )
            else:
                seen[end] = i
    class_ids = [panel.class_id for panel in p.panels]
    if len(set(class_ids)) != len(class_ids):
        stitch_errors.append("duplicate panel class ids")
    passed = ok_all and not stitch_errors
    return ValidationReport(panel_reports, stitch_errors, passed)
