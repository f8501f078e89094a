"""Bezier geometry, placement, pose perturbation, and rendering."""

import numpy as np
import pytest

from sewkit.datagen import sample_pattern, sample_pose
from sewkit.geometry import (
    DegenerateViewBox,
    DomainError,
    EmptyPanel,
    NonUnitQuaternion,
    RenderConfig,
    apply_pose,
    bezier_point,
    control_absolute,
    loop_residual,
    panel_vertices,
    place_point,
    quat_from_axis_angle,
    quat_rotate,
    render_raster,
    render_svg,
    support_vectors,
)
from sewkit.pattern import Edge, Panel, SewingPattern, Stitch

SQUARE = [Edge(1, 0), Edge(0, 1), Edge(-1, 0), Edge(0, -1)]


class TestControlAbsolute:
    def test_halfway_up(self):
        c = control_absolute(Edge(2, 0, 0.5, 0.5), (0, 0), (2, 0))
        assert np.allclose(c, (1, 1))

    def test_zero_control_is_start(self):
        c = control_absolute(Edge(2, 0, 0.0, 0.0), (0, 0), (2, 0))
        assert np.allclose(c, (0, 0))

    def test_perp_is_counterclockwise(self):
        c = control_absolute(Edge(0, 2, 0.5, 0.5), (0, 0), (0, 2))
        assert np.allclose(c, (-1, 1))


class TestBezier:
    def test_endpoints(self):
        assert np.allclose(bezier_point((0, 0), (3, 7), (2, 0), 0.0), (0, 0))
        assert np.allclose(bezier_point((0, 0), (3, 7), (2, 0), 1.0), (2, 0))

    def test_chord_midpoint(self):
        assert np.allclose(bezier_point((0, 0), (1, 0), (2, 0), 0.5), (1, 0))

    def test_curved_midpoint(self):
        assert np.allclose(bezier_point((0, 0), (1, 1), (2, 0), 0.5), (1, 0.5))

    def test_domain(self):
        with pytest.raises(DomainError):
            bezier_point((0, 0), (1, 0), (2, 0), 1.5)


class TestPanelVertices:
    def test_unit_square(self):
        v = panel_vertices(SQUARE)
        ends = v[0::2]
        mids = v[1::2]
        assert np.allclose(ends, [(1, 0), (1, 1), (0, 1), (0, 0)])
        assert np.allclose(mids, [(0.5, 0), (1, 0.5), (0.5, 1), (0, 0.5)])

    def test_single_edge(self):
        v = panel_vertices([Edge(2, 0)])
        assert np.allclose(v, [(2, 0), (1, 0)])

    def test_curved_edge_midpoint(self):
        v = panel_vertices([Edge(2, 0, 0.5, 0.5)])
        assert np.allclose(v[1], (1, 0.5))

    def test_empty(self):
        with pytest.raises(EmptyPanel):
            panel_vertices([])


class TestSupportVectors:
    def test_counts(self):
        assert support_vectors(np.zeros((2, 2))).shape == (1, 2)
        assert support_vectors(panel_vertices(SQUARE)).shape == (28, 2)

    def test_reversed_pair_negates(self):
        verts = np.array([(0.0, 0.0), (3.0, 4.0)])
        fwd = support_vectors(verts)
        rev = support_vectors(verts[::-1])
        assert np.allclose(fwd, -rev)

    def test_index_correspondence(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 2))
        ia, ib = np.triu_indices(5, k=1)
        assert np.allclose(support_vectors(a), a[ib] - a[ia])


class TestLoop:
    def test_closed(self):
        assert np.allclose(loop_residual(SQUARE), (0, 0))

    def test_open(self):
        edges = [Edge(1, 0), Edge(0, 1), Edge(-1, 0), Edge(0, -0.9)]
        assert np.allclose(loop_residual(edges), (0, 0.1))

    def test_zero_rows_contribute_nothing(self):
        edges = SQUARE + [Edge(0, 0), Edge(0, 0)]
        assert np.allclose(loop_residual(edges), (0, 0))

    def test_closure_duality(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            vecs = rng.normal(size=(5, 2))
            edges = [Edge(dx, dy) for dx, dy in vecs]
            closed_edges = edges + [Edge(*(-vecs.sum(axis=0)))]
            last = panel_vertices(closed_edges)[-2]  # final endpoint
            assert np.linalg.norm(loop_residual(closed_edges)) < 1e-9
            assert np.linalg.norm(last) < 1e-9
            open_resid = np.linalg.norm(loop_residual(edges))
            open_last = np.linalg.norm(panel_vertices(edges)[-2])
            assert (open_resid < 1e-9) == (open_last < 1e-9)


class TestPlacePoint:
    def test_identity_translation(self):
        out = place_point((1, 2), (1, 0, 0, 0), (0, 0, 1))
        assert np.allclose(out, (1, 2, 1))

    def test_quarter_turn_about_z(self):
        q = quat_from_axis_angle((0, 0, 1), np.pi / 2)
        assert np.allclose(place_point((1, 0), q, (0, 0, 0)), (0, 1, 0), atol=1e-12)

    def test_double_cover(self):
        q = np.array(quat_from_axis_angle((0.3, 0.5, 0.8), 1.1))
        p = place_point((0.7, -0.2), tuple(q), (1, 2, 3))
        m = place_point((0.7, -0.2), tuple(-q), (1, 2, 3))
        assert np.allclose(p, m, atol=1e-12)

    def test_rigid(self):
        rng = np.random.default_rng(3)
        q = quat_from_axis_angle(tuple(rng.normal(size=3)), 0.9)
        pts = rng.normal(size=(10, 2))
        placed = np.array([place_point(p, q, (0.1, 0.2, -0.3)) for p in pts])
        for i in range(10):
            for j in range(i + 1, 10):
                d0 = np.linalg.norm(pts[i] - pts[j])
                d1 = np.linalg.norm(placed[i] - placed[j])
                assert abs(d0 - d1) < 1e-9

    def test_non_unit_rejected(self):
        with pytest.raises(NonUnitQuaternion):
            place_point((0, 0), (1.0, 0.1, 0, 0), (0, 0, 0))


class TestApplyPose:
    def test_zero_theta_is_identity(self):
        p = sample_pattern("skirt2", 0)
        posed = apply_pose(p, np.zeros(72))
        for a, b in zip(p.panels, posed.panels):
            assert np.allclose(a.rotation, b.rotation, atol=1e-12)
            assert np.allclose(a.translation, b.translation, atol=1e-12)

    def test_yaw_rotates_translations_rigidly(self):
        p = sample_pattern("pants", 1)
        theta = np.zeros(72)
        theta[0] = 0.8
        posed = apply_pose(p, theta)
        yaw = (np.pi / 4) * 0.8
        q = quat_from_axis_angle((0, 1, 0), yaw)
        for a, b in zip(p.panels, posed.panels):
            assert np.allclose(quat_rotate(q, a.translation), b.translation, atol=1e-12)

    def test_global_part_invertible(self):
        p = sample_pattern("tee", 2)
        theta = np.zeros(72)
        theta[0:3] = (0.5, -0.3, 0.7)
        posed = apply_pose(p, theta)
        yaw = (np.pi / 4) * 0.5
        q_inv = quat_from_axis_angle((0, 1, 0), -yaw)
        shift = 0.1 * np.array([-0.3, 0.7, 0.0])
        for a, b in zip(p.panels, posed.panels):
            restored = quat_rotate(q_inv, np.asarray(b.translation) - shift)
            assert np.allclose(restored, a.translation, atol=1e-9)


class TestRaster:
    def test_empty_pattern(self):
        r = render_raster(SewingPattern(), np.zeros(72), RenderConfig())
        assert not r.channels.any()

    def test_one_panel_one_channel(self):
        p = SewingPattern(panels=[Panel(class_id=5, edges=tuple(SQUARE))])
        r = render_raster(p, np.zeros(72), RenderConfig())
        nonzero = {k for k in range(24) if r.channels[k].any()}
        assert nonzero == {5}

    def test_stitches_do_not_affect_channels(self):
        panels = [
            Panel(class_id=0, edges=tuple(SQUARE)),
            Panel(class_id=1, edges=tuple(SQUARE), translation=(0.5, 0, 0)),
        ]
        a = SewingPattern(panels=panels)
        b = SewingPattern(panels=panels, stitches=[Stitch((0, 0), (1, 0))])
        theta = sample_pose(0).as_float64()
        ra = render_raster(a, theta, RenderConfig())
        rb = render_raster(b, theta, RenderConfig())
        assert np.array_equal(ra.channels, rb.channels)

    def test_translation_equivariance(self):
        p = sample_pattern("skirt2", 4)
        theta = np.zeros(72)
        base = render_raster(p, theta, RenderConfig())
        dx, dy = 0.5, -0.25
        shifted_panels = [
            Panel(
                pp.class_id, pp.edges, pp.rotation,
                (pp.translation[0] + dx, pp.translation[1] + dy, pp.translation[2]),
            )
            for pp in p.panels
        ]
        box = RenderConfig().view_box
        cfg2 = RenderConfig(view_box=(box[0] + dx, box[1] + dy, box[2], box[3]))
        moved = render_raster(SewingPattern(panels=shifted_panels), theta, cfg2)
        assert np.array_equal(base.channels, moved.channels)

    def test_degenerate_view_box(self):
        with pytest.raises(DegenerateViewBox):
            render_raster(SewingPattern(), np.zeros(72),
                          RenderConfig(view_box=(0, 0, 0, 1)))

    def test_deterministic_bytes(self):
        p = sample_pattern("tee", 9)
        theta = sample_pose(9).as_float64()
        a = render_raster(p, theta, RenderConfig()).channels.tobytes()
        b = render_raster(p, theta, RenderConfig()).channels.tobytes()
        assert a == b


class TestSvg:
    def test_square_path_segments(self):
        p = SewingPattern(panels=[Panel(class_id=0, edges=tuple(SQUARE))])
        svg = render_svg(p)
        assert svg.count("<path") == 4
        assert "Q" not in svg

    def test_curved_edge_quadratic_command(self):
        p = SewingPattern(
            panels=[Panel(class_id=0, edges=(Edge(1, 0, 0.5, 0.2), Edge(-0.5, 0.5), Edge(-0.5, -0.5)))]
        )
        svg = render_svg(p)
        assert "Q" in svg

    def test_byte_identical(self):
        p = sample_pattern("skirt4", 2)
        assert render_svg(p) == render_svg(p)

    def test_stitched_edges_share_color(self):
        p = sample_pattern("skirt2", 0)
        svg = render_svg(p)
        assert svg.count("#e41a1c") == 2  # first stitch pair
