"""Pattern data model, canonical file format, and tensor conversion."""

import numpy as np
import pytest

from sewkit.datagen import TEMPLATES, sample_pattern
from sewkit.pattern import (
    CapacityExceeded,
    Edge,
    InvariantViolation,
    MalformedFile,
    Panel,
    PatternTensor,
    SchemaViolation,
    SewingPattern,
    Stitch,
    from_tensor,
    parse_pattern,
    serialize_pattern,
    to_tensor,
    validate,
)

SQUARE_EDGES = (Edge(1, 0), Edge(0, 1), Edge(-1, 0), Edge(0, -1))


def square_pattern(class_id=0, stitches=()):
    return SewingPattern(
        panels=[Panel(class_id=class_id, edges=SQUARE_EDGES)],
        stitches=list(stitches),
    )


MINIMAL_FILE = (
    b'{"metadata":{},"panels":[{"class_id":0,'
    b'"edges":[[1,0,0,0],[0,1,0,0],[-1,0,0,0],[0,-1,0,0]],'
    b'"rotation":[1,0,0,0],"translation":[0,0,0]}],"stitches":[],"version":1}'
)


class TestParse:
    def test_minimal_square_file(self):
        p = parse_pattern(MINIMAL_FILE)
        assert len(p.panels) == 1
        assert len(p.panels[0].edges) == 4
        assert p.stitches == []

    def test_stitch_reference_out_of_range(self):
        doc = MINIMAL_FILE.replace(b'"stitches":[]', b'"stitches":[[[0,9],[0,1]]]')
        with pytest.raises(InvariantViolation, match="edge 9"):
            parse_pattern(doc)

    def test_malformed_bytes(self):
        with pytest.raises(MalformedFile):
            parse_pattern(b"{not json")

    def test_missing_field_names_path(self):
        doc = MINIMAL_FILE.replace(b'"rotation":[1,0,0,0],', b"")
        with pytest.raises(SchemaViolation, match=r"panels\[0\]"):
            parse_pattern(doc)

    def test_bad_version(self):
        with pytest.raises(SchemaViolation, match="version"):
            parse_pattern(MINIMAL_FILE.replace(b'"version":1', b'"version":2'))

    def test_duplicate_stitch_endpoint(self):
        square2 = (
            b'{"metadata":{},"panels":['
            b'{"class_id":0,"edges":[[1,0,0,0],[0,1,0,0],[-1,0,0,0],[0,-1,0,0]],'
            b'"rotation":[1,0,0,0],"translation":[0,0,0]},'
            b'{"class_id":1,"edges":[[1,0,0,0],[0,1,0,0],[-1,0,0,0],[0,-1,0,0]],'
            b'"rotation":[1,0,0,0],"translation":[0,0,0]}],'
            b'"stitches":[[[0,1],[1,1]],[[0,1],[1,3]]],"version":1}'
        )
        with pytest.raises(InvariantViolation, match="already used"):
            parse_pattern(square2)

    def test_too_few_valid_edges(self):
        doc = MINIMAL_FILE.replace(
            b"[[1,0,0,0],[0,1,0,0],[-1,0,0,0],[0,-1,0,0]]",
            b"[[1,0,0,0],[-1,0.001,0,0],[0,-0.001,0,0]]",
        )
        with pytest.raises(InvariantViolation, match="valid edges"):
            parse_pattern(doc)

    def test_non_unit_quaternion(self):
        doc = MINIMAL_FILE.replace(b'"rotation":[1,0,0,0]', b'"rotation":[1,0.1,0,0]')
        with pytest.raises(InvariantViolation, match="quaternion"):
            parse_pattern(doc)


class TestSerialize:
    def test_round_trip_identity(self):
        p = square_pattern()
        b = serialize_pattern(p)
        assert parse_pattern(b) == p

    def test_generator_byte_round_trip(self):
        for name in TEMPLATES:
            for seed in range(25):
                b = serialize_pattern(sample_pattern(name, seed))
                assert serialize_pattern(parse_pattern(b)) == b

    def test_equal_patterns_equal_bytes_regardless_of_stitch_order(self):
        panels = [
            Panel(class_id=k, edges=SQUARE_EDGES) for k in (0, 1, 2)
        ]
        s1 = [Stitch((0, 0), (1, 0)), Stitch((2, 1), (0, 3))]
        s2 = [Stitch((2, 1), (0, 3)), Stitch((0, 0), (1, 0))]
        a = SewingPattern(panels=panels, stitches=s1)
        b = SewingPattern(panels=panels, stitches=s2)
        assert a == b
        assert serialize_pattern(a) == serialize_pattern(b)

    def test_stitch_canonical_endpoint_order(self):
        s = Stitch((2, 1), (0, 3))
        assert s.first == (0, 3) and s.second == (2, 1)
        b = serialize_pattern(square_pattern())
        assert b.endswith(b"}\n")

    def test_serialization_idempotent(self):
        p = sample_pattern("tee", 3)
        b = serialize_pattern(p)
        assert serialize_pattern(parse_pattern(b)) == b

    def test_self_stitch_rejected(self):
        with pytest.raises(InvariantViolation):
            Stitch((0, 1), (0, 1))


class TestTensor:
    def test_empty_pattern_all_zero(self):
        t = to_tensor(SewingPattern())
        assert not t.panel_mask.any()
        assert not t.edge_mask.any()
        assert not t.edges.any() and not t.rot.any() and not t.trans.any()

    def test_single_panel_slot3(self):
        t = to_tensor(square_pattern(class_id=3))
        assert t.panel_mask.sum() == 1 and t.panel_mask[3]
        assert t.edge_mask[3].sum() == 4
        assert t.edge_mask.sum() == 4

    def test_capacity_exceeded(self):
        edges = tuple(Edge(0.1 * (i + 1), 0.1) for i in range(9))
        p = SewingPattern(panels=[Panel(class_id=0, edges=edges)])
        with pytest.raises(CapacityExceeded):
            to_tensor(p, e_max=8)

    def test_mask_consistency(self):
        for name in TEMPLATES:
            t = to_tensor(sample_pattern(name, 0))
            assert not t.edges[~t.edge_mask].any()
            assert not t.rot[~t.panel_mask].any()
            assert not t.trans[~t.panel_mask].any()
            assert (t.edge_mask.sum(axis=1)[t.panel_mask] >= 3).all()

    def test_round_trip_over_generator_corpus(self):
        for name in TEMPLATES:
            for seed in range(10):
                p = sample_pattern(name, seed)
                back = from_tensor(to_tensor(p))
                assert back.panels == p.panels

    def test_from_tensor_prunes_short_edges(self):
        t = to_tensor(SewingPattern())
        t.edges[0, 0] = [1, 0, 0, 0]
        t.edges[0, 1] = [0, 1, 0, 0]
        t.edges[0, 2] = [-1, -1, 0, 0]
        t.edges[0, 3] = [1e-5, 0, 0, 0]
        t.rot[0] = [1, 0, 0, 0]
        p = from_tensor(t)
        assert len(p.panels) == 1
        assert len(p.panels[0].edges) == 3

    def test_from_tensor_drops_small_panels(self):
        t = to_tensor(SewingPattern())
        t.edges[2, 0] = [1, 0, 0, 0]
        t.edges[2, 1] = [0, 1, 0, 0]
        p = from_tensor(t)
        assert p.panels == []

    def test_from_tensor_all_zero(self):
        assert from_tensor(to_tensor(SewingPattern())).panels == []

    def test_from_tensor_normalizes_garbage_rotation(self):
        t = to_tensor(SewingPattern())
        for j, e in enumerate(SQUARE_EDGES):
            t.edges[0, j] = e.params()
        t.rot[0] = [2.0, 0, 0, 0]
        p = from_tensor(t)
        assert p.panels[0].rotation == (1.0, 0.0, 0.0, 0.0)


class TestValidate:
    def test_generator_output_passes(self):
        for name in TEMPLATES:
            report = validate(sample_pattern(name, 1))
            assert report.passed
            assert max(r.loop_residual for r in report.panels) <= 1e-6

    def test_broken_loop_fails(self):
        edges = (Edge(1, 0), Edge(0, 1), Edge(-1, 0), Edge(0, -0.9))
        p = SewingPattern(panels=[Panel(class_id=0, edges=edges)])
        report = validate(p)
        assert not report.passed
        assert abs(report.panels[0].loop_residual - 0.1) < 1e-12

    def test_duplicate_endpoint_reported_with_index(self):
        panels = [Panel(class_id=k, edges=SQUARE_EDGES) for k in (0, 1, 2)]
        p = SewingPattern(
            panels=panels,
            stitches=[Stitch((0, 1), (1, 1)), Stitch((0, 1), (2, 1))],
        )
        report = validate(p)
        assert not report.passed
        assert any("stitch 1" in e for e in report.stitch_errors)
