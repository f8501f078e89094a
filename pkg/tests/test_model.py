"""Model shapes, initialization, determinism, and differentiability."""

import numpy as np
import pytest

import sewkit.autodiff as ad
from sewkit.autodiff import Tape
from sewkit.checkpoint import load_checkpoint, save_checkpoint
from sewkit.datagen import sample_pattern, sample_pose
from sewkit.geometry import RenderConfig, render_raster
from sewkit.model import (
    ModelConfig,
    forward,
    forward_batch,
    init_params,
    lift_params,
    param_count,
    param_shapes,
    patchify,
    predict,
)

TOY = ModelConfig(
    d_model=16, heads=2, enc_layers=1, panel_dec_layers=1, edge_dec_layers=1,
    num_classes=6, e_max=4, patch=8, in_channels=6, height=16, width=16,
    d_tag=4, mlp_ratio=2, pose_dim=8,
)

# regression constant, computed once from the formula below
DEFAULT_PARAM_COUNT = 547_740


def formula_count(c: ModelConfig) -> int:
    d, r = c.d_model, c.mlp_ratio
    attn = 4 * (d * d + d)
    mlp = d * (d * r) + d * r + (d * r) * d + d
    ln = 2 * d
    enc = c.enc_layers * (2 * ln + attn + mlp) + ln
    dec_layer = 3 * ln + 2 * attn + mlp
    paneldec = (c.num_classes + 1) * d + c.panel_dec_layers * dec_layer + ln
    edgedec = c.num_classes * c.e_max * d + mlp + c.edge_dec_layers * dec_layer + ln
    embed = c.patch_dim * d + d + c.tokens * d

    def head(out):
        return d * d + d + d * out + out

    heads = head(4) + head(3) + head(c.pose_dim) + head(4) + head(c.d_tag) + head(1)
    return embed + enc + paneldec + edgedec + heads


def toy_raster():
    pattern = sample_pattern("skirt2", 5)
    theta = sample_pose(5).as_float64()
    cfg = RenderConfig(num_classes=TOY.in_channels, height=16, width=16)
    return render_raster(pattern, theta, cfg)


class TestInit:
    def test_deterministic_per_seed(self):
        a = init_params(TOY, 3)
        b = init_params(TOY, 3)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_seeds_differ(self):
        a = init_params(TOY, 0)
        b = init_params(TOY, 1)
        assert not np.array_equal(a["paneldec.queries"], b["paneldec.queries"])

    def test_param_count_formula(self):
        assert param_count(ModelConfig()) == formula_count(ModelConfig()) == DEFAULT_PARAM_COUNT
        assert param_count(TOY) == formula_count(TOY)

    def test_shapes_account_for_every_array(self):
        params = init_params(TOY, 0)
        shapes = param_shapes(TOY)
        assert set(params) == set(shapes)
        assert all(params[k].shape == tuple(shapes[k]) for k in params)


class TestForward:
    def test_output_shapes_default_config(self):
        cfg = ModelConfig()
        params = lift_params(init_params(cfg, 0), None)
        pattern = sample_pattern("tee", 0)
        raster = render_raster(pattern, sample_pose(0).as_float64(), RenderConfig())
        out = forward(params, cfg, raster)
        assert out.edges.shape == (24, 8, 4)
        assert out.rot.shape == (24, 4)
        assert out.trans.shape == (24, 3)
        assert out.tags.shape == (24 * 8, 8)
        assert out.free_logits.shape == (24 * 8,)
        assert out.theta.shape == (72,)

    def test_rot_rows_unit_norm(self):
        params = lift_params(init_params(TOY, 1), None)
        out = forward(params, TOY, toy_raster())
        assert np.abs(np.linalg.norm(out.rot.data, axis=-1) - 1).max() < 1e-6

    def test_token_count_and_positional_table(self):
        cfg = ModelConfig()
        assert cfg.tokens == (64 // 8) * (64 // 8)
        assert init_params(cfg, 0)["embed.pos"].shape[0] == cfg.tokens

    def test_batch_permutation_equivariance(self):
        params = lift_params(init_params(TOY, 2), None)
        rng = np.random.default_rng(0)
        batch = rng.random((3, TOY.in_channels, 16, 16)).astype(np.float32)
        out = forward_batch(params, TOY, patchify(batch, TOY))
        perm = [2, 0, 1]
        out_p = forward_batch(params, TOY, patchify(batch[perm], TOY))
        assert np.allclose(out.edges.data[perm], out_p.edges.data, atol=1e-6)
        assert np.allclose(out.theta.data[perm], out_p.theta.data, atol=1e-6)

    def test_fused_edge_queries_equal_for_equal_inputs(self):
        params = init_params(TOY, 0)
        # rows 0 and 1 live in panel 0; give them identical query values
        params["edgedec.queries"][1] = params["edgedec.queries"][0]
        lifted = lift_params(params, None)
        b, k, e, d = 1, TOY.num_classes, TOY.e_max, TOY.d_model
        fp = ad.constant(np.random.default_rng(1).normal(size=(b, k, d)))
        eq = ad.constant(np.broadcast_to(params["edgedec.queries"], (b, k * e, d)).copy())
        panel_of_edge = np.repeat(np.arange(k), e)
        from sewkit.model import _mlp_block
        fused = _mlp_block(lifted, "edgedec.fuse", eq + ad.gather(fp, panel_of_edge, axis=1))
        assert np.array_equal(fused.data[0, 0], fused.data[0, 1])

    def test_every_head_receives_gradient(self):
        from sewkit.cli import toy_gradcheck_setup
        from sewkit.trainer import compute_batch_loss

        cfg, tc, bgt, patches = toy_gradcheck_setup()
        params = init_params(cfg, 0, dtype=np.float64)
        tape = Tape()
        leaves = lift_params(params, tape)
        out = forward_batch(leaves, cfg, patches)
        total, _, _ = compute_batch_loss(out, bgt, tc)
        grads = tape.backward(total)
        for head in ("head.rot.w2", "head.trans.w2", "head.pose.w2",
                     "head.edge.w2", "head.tag.w2", "head.free.w2",
                     "embed.proj_w", "paneldec.queries", "edgedec.queries"):
            g = grads[leaves[head].node_id]
            assert np.linalg.norm(g) > 0, head


class TestPredict:
    def test_untrained_structural_contract(self):
        params = init_params(TOY, 4)
        pattern = predict(params, TOY, toy_raster(), eps_edge=1e-2)
        by_class = {p.class_id: p for p in pattern.panels}
        for panel in pattern.panels:
            assert len(panel.edges) >= 3
            for e in panel.edges:
                assert e.length() > 1e-2
        for s in pattern.stitches:
            for slot, eidx in s.endpoints():
                assert slot in by_class
                assert 0 <= eidx < len(by_class[slot].edges)

    def test_zero_raster_no_crash(self):
        params = init_params(TOY, 4)
        raster = np.zeros((TOY.in_channels, 16, 16), np.float32)
        pattern = predict(params, TOY, raster)
        assert pattern is not None


class TestCheckpoint:
    def test_round_trip_with_config(self, tmp_path):
        params = init_params(TOY, 7)
        path = tmp_path / "m.sewckpt"
        save_checkpoint(path, params, {"model": TOY.to_dict()})
        loaded, meta = load_checkpoint(path)
        assert ModelConfig.from_dict(meta["model"]) == TOY
        assert set(loaded) == set(params)
        assert all(np.array_equal(loaded[k], params[k].astype(np.float32)) for k in params)

    def test_save_load_save_byte_identical(self, tmp_path):
        params = init_params(TOY, 8)
        p1 = tmp_path / "a.sewckpt"
        p2 = tmp_path / "b.sewckpt"
        save_checkpoint(p1, params, {"model": TOY.to_dict()})
        loaded, meta = load_checkpoint(p1)
        save_checkpoint(p2, loaded, meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_crc_corruption_detected(self, tmp_path):
        from sewkit.checkpoint import CheckpointCorrupt

        path = tmp_path / "c.sewckpt"
        save_checkpoint(path, init_params(TOY, 0), None)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointCorrupt):
            load_checkpoint(path)
