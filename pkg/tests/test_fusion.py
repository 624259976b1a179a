import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose

from voxfuse import reference
from voxfuse.fusion import (
    DropoutMask,
    FusionParams,
    dense_attention,
    dense_attention_batch,
    fuse_scene,
    identity_projection_params,
    image_contribution,
    image_contribution_batch,
    image_contribution_backward,
    make_dense_params,
    make_dropout_mask,
    make_params,
    make_token,
)
from voxfuse.nnops import FeatureMap, LinearLayer, bilinear_sample
from voxfuse.scenegen import generate_pyramid, generate_scene
from voxfuse.selftest import deform_gradient_max_relerr
from voxfuse.voxels import VoxelConfig, voxelize


def random_level_stack(rng, shape, channels, n_levels):
    h, w = shape
    levels = []
    for lv in range(n_levels):
        hh, ww = max(2, h >> lv), max(2, w >> lv)
        levels.append(FeatureMap(rng.standard_normal((hh, ww, channels))))
    refs = np.array(
        [[rng.uniform(0, lm.w - 1.0), rng.uniform(0, lm.h - 1.0)] for lm in levels]
    )
    return tuple(levels), refs


class TestParams:
    def test_make_params_shapes(self):
        rng = np.random.default_rng(0)
        p = make_params(rng, heads=4, points=8, img_channels=16, out_channels=12)
        assert p.value_proj.shape == (4, 4, 16)
        assert p.output_proj.shape == (4, 12, 4)
        assert p.offset_net.out_dim == 2 * 4 * 8
        assert p.attn_net.out_dim == 4 * 8
        assert p.voxel_map is not None and p.voxel_map.in_dim == 12

    def test_default_sampling_nets_are_zero(self):
        rng = np.random.default_rng(1)
        p = make_params(rng, heads=2, points=3, img_channels=4)
        assert not p.offset_net.weight.any() and not p.offset_net.bias.any()
        assert not p.attn_net.weight.any() and not p.attn_net.bias.any()

    def test_voxel_map_required_when_widths_differ(self):
        rng = np.random.default_rng(2)
        p = make_params(rng, heads=2, points=2, img_channels=4, out_channels=6)
        with pytest.raises(ValueError):
            dataclasses.replace(p, voxel_map=None)

    def test_identity_projection_blocks(self):
        rng = np.random.default_rng(3)
        p = identity_projection_params(rng, heads=4, points=2, channels=8)
        # sum_m output_m @ value_m must be the identity on the image channels
        total = sum(p.output_proj[m] @ p.value_proj[m] for m in range(4))
        assert_allclose(total, np.eye(8), atol=0)

    def test_identity_projection_rejects_ragged_split(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            identity_projection_params(rng, heads=3, points=2, channels=8)


class TestToken:
    def test_hand_computed_token(self):
        # token = W (img * voxel) + b with a voxel adapter left out (c == d)
        p = FusionParams(
            heads=1,
            points=1,
            token_fc=LinearLayer(np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([0.5, 0.0])),
            offset_net=LinearLayer.zeros(2, 2),
            attn_net=LinearLayer.zeros(1, 2),
            value_proj=np.ones((1, 2, 2)),
            output_proj=np.ones((1, 2, 2)),
        )
        tok = make_token(np.array([2.0, 3.0]), np.array([1.0, -1.0]), p)
        # product = (2, -3); W @ product + b = (2 - 6 + 0.5, -3)
        assert_allclose(tok, [-3.5, -3.0])

    def test_adapter_feeds_product(self):
        rng = np.random.default_rng(5)
        p = make_params(rng, heads=1, points=1, img_channels=3, out_channels=5)
        vox = rng.standard_normal(5)
        img = rng.standard_normal(3)
        adapted = p.voxel_map.weight @ vox + p.voxel_map.bias
        expected = p.token_fc.weight @ (img * adapted) + p.token_fc.bias
        assert_allclose(make_token(img, vox, p), expected, atol=1e-14)


class TestDeformOperator:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(10)
        for case in range(30):
            m = int(rng.integers(1, 5))
            k = int(rng.integers(1, 6))
            d = int(rng.integers(2, 7))
            c = d if case % 2 == 0 else d + 2
            n_levels = int(rng.integers(1, 4))
            p = make_params(rng, m, k, d, c, random_sampling=True)
            levels, refs = random_level_stack(rng, (11, 9), d, n_levels)
            if case % 3 == 0:
                refs = refs + rng.uniform(-6, 6, refs.shape)  # push some off-map
            feat = rng.standard_normal(c)
            got = image_contribution(levels, refs, feat, p)
            want = reference.deform_ref(
                [lm.data for lm in levels], refs, feat, p
            )
            assert_allclose(got, want, atol=1e-10, rtol=0)

    def test_zero_offsets_reduce_to_bilinear_lookup(self):
        rng = np.random.default_rng(11)
        p = identity_projection_params(rng, heads=2, points=4, channels=6)
        fmap = FeatureMap(rng.standard_normal((8, 9, 6)))
        for _ in range(20):
            ref = (rng.uniform(-2, fmap.w + 1), rng.uniform(-2, fmap.h + 1))
            got = image_contribution((fmap,), (ref,), np.zeros(6), p)
            want = bilinear_sample(fmap, ref[0], ref[1])
            assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_level_average(self):
        # identical maps at every level with zero offsets -> same as one level
        rng = np.random.default_rng(12)
        p = identity_projection_params(rng, heads=1, points=2, channels=4)
        fmap = FeatureMap(rng.standard_normal((6, 6, 4)))
        one = image_contribution((fmap,), ((2.0, 3.0),), np.zeros(4), p)
        three = image_contribution(
            (fmap, fmap, fmap), ((2.0, 3.0),) * 3, np.zeros(4), p
        )
        assert_allclose(three, one, atol=1e-14)

    def test_rejects_ref_level_mismatch(self):
        rng = np.random.default_rng(13)
        p = make_params(rng, 1, 1, 3)
        fmap = FeatureMap(rng.standard_normal((4, 4, 3)))
        with pytest.raises(ValueError):
            image_contribution((fmap, fmap), ((1.0, 1.0),), np.zeros(3), p)

    def test_analytic_gradients_one_config(self):
        rng = np.random.default_rng(14)
        worst = deform_gradient_max_relerr(rng, heads=2, points=3, channels=6)
        assert worst < 1e-4

    def test_backward_returns_all_groups(self):
        rng = np.random.default_rng(15)
        p = make_params(rng, 2, 3, 4, 7, random_sampling=True)
        levels, refs = random_level_stack(rng, (8, 8), 4, 2)
        g = image_contribution_backward(
            levels, refs, rng.standard_normal(7), p, rng.standard_normal(7)
        )
        assert g.value_proj.shape == p.value_proj.shape
        assert g.voxel_map_weight.shape == p.voxel_map.weight.shape
        assert len(g.level_maps) == 2
        assert g.voxel_feat.shape == (7,)


class TestBatchDuality:
    def test_deform_batch_equals_loop(self):
        rng = np.random.default_rng(20)
        p = make_params(rng, 3, 4, 5, 5, random_sampling=True)
        levels, _ = random_level_stack(rng, (10, 12), 5, 2)
        n = 40
        refs = np.stack(
            [
                np.column_stack(
                    [rng.uniform(-1, lm.w, n), rng.uniform(-1, lm.h, n)]
                )
                for lm in levels
            ],
            axis=1,
        )
        feats = rng.standard_normal((n, 5))
        batch = image_contribution_batch(levels, refs, feats, p)
        for i in range(n):
            single = image_contribution(levels, refs[i], feats[i], p)
            assert_allclose(batch[i], single, atol=1e-12, rtol=0)

    def test_deform_batch_single_level_2d_refs(self):
        rng = np.random.default_rng(21)
        p = make_params(rng, 1, 2, 3, random_sampling=True)
        fmap = FeatureMap(rng.standard_normal((7, 7, 3)))
        refs = np.column_stack([rng.uniform(0, 6, 10), rng.uniform(0, 6, 10)])
        batch = image_contribution_batch((fmap,), refs, rng.standard_normal((10, 3)), p)
        assert batch.shape == (10, 3)

    def test_dense_batch_equals_loop(self):
        rng = np.random.default_rng(22)
        p = make_dense_params(rng, img_channels=4, out_channels=6)
        fmap = FeatureMap(rng.standard_normal((9, 11, 4)))
        feats = rng.standard_normal((25, 6))
        batch = dense_attention_batch(fmap, feats, p)
        for i in range(25):
            assert_allclose(batch[i], dense_attention(fmap, feats[i], p), atol=1e-12)

    def test_dense_chunking_changes_nothing(self):
        rng = np.random.default_rng(23)
        p = make_dense_params(rng, img_channels=3, out_channels=3)
        fmap = FeatureMap(rng.standard_normal((6, 8, 3)))
        feats = rng.standard_normal((17, 3))
        full = dense_attention_batch(fmap, feats, p)
        tiny = dense_attention_batch(fmap, feats, p, chunk_elems=1)
        # chunking reorders BLAS dispatch, so equality is numeric not bitwise
        assert_allclose(tiny, full, atol=1e-13, rtol=0)

    def test_empty_batches(self):
        rng = np.random.default_rng(24)
        p = make_params(rng, 1, 1, 3)
        fmap = FeatureMap(rng.standard_normal((4, 4, 3)))
        out = image_contribution_batch((fmap,), np.zeros((0, 2)), np.zeros((0, 3)), p)
        assert out.shape == (0, 3)
        dp = make_dense_params(rng, 3, 5)
        assert dense_attention_batch(fmap, np.zeros((0, 5)), dp).shape == (0, 5)


class TestDenseOperator:
    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(30)
        for _ in range(10):
            d = int(rng.integers(2, 6))
            c = int(rng.integers(2, 6))
            p = make_dense_params(rng, d, c)
            fmap = FeatureMap(rng.standard_normal((int(rng.integers(2, 8)), int(rng.integers(2, 8)), d)))
            feat = rng.standard_normal(c)
            assert_allclose(
                dense_attention(fmap, feat, p),
                reference.dense_ref(fmap.data, feat, p),
                atol=1e-10,
                rtol=0,
            )

    def test_uniform_map_attention_is_flat(self):
        # constant image -> every pixel scores identically -> value passthrough
        rng = np.random.default_rng(31)
        p = make_dense_params(rng, 3, 3)
        fmap = FeatureMap(np.full((5, 7, 3), 0.25))
        out = dense_attention(fmap, rng.standard_normal(3), p)
        pix = np.full(3, 0.25)
        ctx = p.value.weight @ pix + p.value.bias
        assert_allclose(out, p.out.weight @ ctx + p.out.bias, atol=1e-12)


class TestDropoutMask:
    def test_kept_count(self):
        assert DropoutMask(keep=(True, False, True)).kept_count == 2

    def test_keep_bounds_checked(self):
        with pytest.raises(ValueError):
            make_dropout_mask(4, 5, 0)
        with pytest.raises(ValueError):
            make_dropout_mask(4, -1, 0)

    def test_seed_determinism(self):
        a = make_dropout_mask(8, 3, 42)
        b = make_dropout_mask(8, 3, 42)
        assert a.keep == b.keep
        assert a.kept_count == 3

    def test_accepts_generator(self):
        g = np.random.default_rng(7)
        m = make_dropout_mask(5, 2, g)
        assert m.kept_count == 2


def small_scene(seed=7):
    from voxfuse.scenegen import SceneConfig

    cfg = SceneConfig(camera_count=3, box_count=2, points_per_box=150, ground_points=800)
    sample = generate_scene(seed, cfg)
    voxels = voxelize(sample.cloud, VoxelConfig((0.8, 0.8, 0.8), bounds=cfg.bounds))
    pyramids = tuple(generate_pyramid(img, 2) for img in sample.images)
    rng = np.random.default_rng(seed + 1)
    params = make_params(
        rng,
        heads=2,
        points=4,
        img_channels=pyramids[0].levels[0].d,
        out_channels=voxels.feature_dim,
        random_sampling=True,
    )
    return sample, voxels, pyramids, params


class TestFuseScene:
    def test_all_cameras_dropped_is_bit_identical_passthrough(self):
        sample, voxels, pyramids, params = small_scene()
        mask = DropoutMask(keep=(False,) * 3)
        fused = fuse_scene(voxels, pyramids, sample.rig, params, mask)
        assert fused.fused.tobytes() == voxels.features.tobytes()
        assert not fused.contributed.any()
        # provenance is still recorded for visible voxels
        assert (fused.cameras >= 0).any()

    def test_dropped_camera_equals_zeroed_pyramid(self):
        # bias-free value/output projections: masking camera 0 must give the
        # same fused features as feeding camera 0 an all-zero image
        sample, voxels, pyramids, params = small_scene()
        masked = fuse_scene(
            voxels, pyramids, sample.rig, params, DropoutMask((False, True, True))
        )
        zeroed = tuple(
            dataclasses.replace(
                pyr,
                levels=tuple(FeatureMap(np.zeros_like(lm.data)) for lm in pyr.levels),
            )
            if j == 0
            else pyr
            for j, pyr in enumerate(pyramids)
        )
        unmasked = fuse_scene(
            voxels, zeroed, sample.rig, params, DropoutMask((True, True, True))
        )
        assert_allclose(masked.fused, unmasked.fused, atol=0)

    def test_fused_recomposition(self):
        sample, voxels, pyramids, params = small_scene()
        mask = DropoutMask((True, True, True))
        fused = fuse_scene(voxels, pyramids, sample.rig, params, mask)
        idx = np.flatnonzero(fused.contributed)[:20]
        for i in idx:
            cam = fused.cameras[i]
            from voxfuse.geometry import select_camera

            res = select_camera(sample.rig, voxels.centers[i])
            assert res.camera_index == cam
            refs = tuple(
                (res.pixel[0] * s, res.pixel[1] * s) for s in pyramids[cam].scales
            )
            contrib = image_contribution(
                pyramids[cam].levels, refs, voxels.features[i], params
            )
            assert_allclose(fused.fused[i], voxels.features[i] + contrib, atol=1e-14)

    def test_workers_do_not_change_results(self):
        sample, voxels, pyramids, params = small_scene()
        mask = make_dropout_mask(3, 2, 5)
        serial = fuse_scene(voxels, pyramids, sample.rig, params, mask, workers=0)
        threaded = fuse_scene(voxels, pyramids, sample.rig, params, mask, workers=4)
        assert serial.fused.tobytes() == threaded.fused.tobytes()
        assert np.array_equal(serial.cameras, threaded.cameras)
        assert np.array_equal(serial.contributed, threaded.contributed)

    def test_kept_camera_missing_pyramid_rejected(self):
        sample, voxels, pyramids, params = small_scene()
        broken = (None,) + pyramids[1:]
        with pytest.raises(ValueError):
            fuse_scene(voxels, broken, sample.rig, params, DropoutMask((True,) * 3))
        # but a dropped camera may omit its pyramid entirely
        ok = fuse_scene(
            voxels, broken, sample.rig, params, DropoutMask((False, True, True))
        )
        assert ok.fused.shape == voxels.features.shape

    def test_mask_length_checked(self):
        sample, voxels, pyramids, params = small_scene()
        with pytest.raises(ValueError):
            fuse_scene(voxels, pyramids, sample.rig, params, DropoutMask((True, False)))
