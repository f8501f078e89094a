"""Template construction, sampling determinism, and the dataset builder."""

import numpy as np
import pytest

from sewkit import datagen
from sewkit.datagen import (
    DatasetConfig,
    DuplicateAfterMaxRetries,
    TEMPLATES,
    build_dataset,
    load_manifest,
    load_pose,
    load_raster,
    load_split,
    sample_pattern,
    sample_pose,
    write_raster,
)
from sewkit.geometry import apply_pose
from sewkit.pattern import parse_pattern, serialize_pattern, to_tensor, validate


class TestTemplates:
    def test_skirt2_structure(self):
        p = sample_pattern("skirt2", 0)
        assert len(p.panels) == 2
        assert all(len(panel.edges) == 4 for panel in p.panels)
        assert len(p.stitches) == 2
        for panel in p.panels:
            assert np.hypot(*panel.loop_residual()) <= 1e-9

    def test_tee_structure(self):
        p = sample_pattern("tee", 1)
        assert len(p.panels) == 4
        front = p.panel_by_class(datagen.TOP_FRONT)
        assert front.edges[3].cy > 0  # curved neckline
        assert len(p.stitches) == 6

    def test_all_templates_valid(self):
        for name in TEMPLATES:
            for seed in (0, 5):
                p = sample_pattern(name, seed)
                assert validate(p).passed
                for panel in p.panels:
                    assert 3 <= len(panel.edges) <= 8

    def test_seam_lengths_compatible(self):
        for name in TEMPLATES:
            p = sample_pattern(name, 2)
            by_class = {panel.class_id: panel for panel in p.panels}
            for s in p.stitches:
                (a, ae), (b, be) = s.endpoints()
                la = by_class[a].edges[ae].length()
                lb = by_class[b].edges[be].length()
                assert abs(la - lb) < 1e-6

    def test_deterministic_bytes(self):
        for name in TEMPLATES:
            assert serialize_pattern(sample_pattern(name, 9)) == serialize_pattern(
                sample_pattern(name, 9)
            )

    def test_params_within_ranges(self):
        for name, spec in TEMPLATES.items():
            rng = np.random.default_rng(0)
            params = datagen.sample_template_params(spec, rng)
            for key, (lo, hi) in spec.param_ranges.items():
                assert lo <= params[key] <= hi


class TestPose:
    def test_deterministic(self):
        assert np.array_equal(sample_pose(3).theta, sample_pose(3).theta)

    def test_range(self):
        theta = sample_pose(1).theta
        assert theta.shape == (72,)
        assert (theta >= -1).all() and (theta <= 1).all()

    def test_seeds_differ(self):
        for seed in range(100):
            a = sample_pose(seed).theta
            b = sample_pose(seed + 1000).theta
            assert (a != b).any()

    def test_apply_pose_identity(self):
        p = sample_pattern("skirt4", 0)
        posed = apply_pose(p, np.zeros(72))
        assert [pp.translation for pp in posed.panels] == [
            pytest.approx(pp.translation) for pp in p.panels
        ]


class TestBuildDataset:
    @pytest.fixture(scope="class")
    def built(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("ds")
        cfg = DatasetConfig(
            name="mini",
            counts={"skirt2": 5, "tee": 5},
            split=0.8,
            seed=123,
        )
        manifest = build_dataset(cfg, root)
        return root, cfg, manifest

    def test_split_sizes_disjoint(self, built):
        _, _, mf = built
        assert len(mf.train_ids) == 8
        assert len(mf.test_ids) == 2
        assert not set(mf.train_ids) & set(mf.test_ids)

    def test_rerun_byte_identical(self, built, tmp_path):
        root, cfg, _ = built
        build_dataset(cfg, tmp_path)
        for rel in sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file()):
            assert (root / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel

    def test_patterns_validate(self, built):
        root, cfg, mf = built
        for sid in mf.train_ids + mf.test_ids:
            pattern = parse_pattern((root / "mini" / "patterns" / f"{sid}.json").read_bytes())
            assert validate(pattern).passed

    def test_label_consistency(self, built):
        root, cfg, mf = built
        data = load_split(root / "mini", "train")
        for sid, tensor in zip(data.ids, data.tensors):
            pattern = parse_pattern((root / "mini" / "patterns" / f"{sid}.json").read_bytes())
            ref = to_tensor(pattern, mf.e_max, mf.num_classes)
            assert np.array_equal(tensor.edges, ref.edges)
            assert np.array_equal(tensor.panel_mask, ref.panel_mask)

    def test_raster_file_format(self, built, tmp_path):
        root, _, mf = built
        sid = mf.train_ids[0]
        path = root / "mini" / "rasters" / f"{sid}.bin"
        blob = path.read_bytes()
        assert blob[:7] == b"SEWRAS1"
        arr = load_raster(path)
        assert arr.shape == (24, 64, 64)
        assert arr.min() >= 0.0 and arr.max() <= 1.0
        out = tmp_path / "copy.bin"
        write_raster(out, arr)
        assert out.read_bytes() == blob

    def test_pose_file_format(self, built):
        root, _, mf = built
        theta = load_pose(root / "mini" / "poses" / f"{mf.train_ids[0]}.bin")
        assert theta.shape == (72,)
        assert theta.dtype == np.float32

    def test_manifest_loads(self, built):
        root, _, mf = built
        again = load_manifest(root / "mini")
        assert again.train_ids == mf.train_ids
        assert again.samples == mf.samples

    def test_rasters_depend_on_pose(self, built):
        root, _, mf = built
        data = load_split(root / "mini", "train")
        # two same-template samples with different params/poses differ
        assert (data.rasters[0] != data.rasters[1]).any()


def test_duplicate_retry_exhaustion(monkeypatch, tmp_path):
    spec = TEMPLATES["skirt2"]
    fixed = {k: lo for k, (lo, hi) in spec.param_ranges.items()}
    monkeypatch.setattr(datagen, "sample_template_params", lambda s, rng: dict(fixed))
    monkeypatch.setattr(
        datagen.np.random.Generator,
        "uniform",
        lambda self, lo, hi, size=None: np.zeros(size) if size else 0.0,
    )
    cfg = DatasetConfig(name="dup", counts={"skirt2": 2}, split=1.0, seed=0, max_retries=3)
    with pytest.raises(DuplicateAfterMaxRetries):
        build_dataset(cfg, tmp_path)
