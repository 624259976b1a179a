import numpy as np
import pytest
from numpy.testing import assert_allclose

from voxfuse import reference
from voxfuse.voxels import PointCloud, VoxelConfig, VoxelSet, voxelize

CFG = VoxelConfig(voxel_size=(0.5, 0.5, 0.5), bounds=(-2.0, -2.0, -1.0, 2.0, 2.0, 1.0))


class TestConfig:
    def test_grid_cells(self):
        assert CFG.grid_cells == (8, 8, 4)

    def test_rejects_nonpositive_size(self):
        with pytest.raises(ValueError):
            VoxelConfig(voxel_size=(0.5, -0.5, 0.5), bounds=CFG.bounds)

    def test_rejects_degenerate_range(self):
        with pytest.raises(ValueError):
            VoxelConfig(voxel_size=(0.5, 0.5, 0.5), bounds=(0, 0, 0, 0, 1, 1))


class TestSinglePoints:
    def test_point_at_cell_center_has_zero_offset(self):
        # center of cell (0,0,0) is bounds_lo + 0.25
        cloud = PointCloud(np.array([[-1.75, -1.75, -0.75, 0.3]]))
        vox = voxelize(cloud, CFG)
        assert len(vox) == 1
        assert vox.indices[0].tolist() == [0, 0, 0]
        assert_allclose(vox.features[0], [0.3, 0.0, 0.0, 0.0])
        assert vox.counts[0] == 1

    def test_two_points_mean_intensity(self):
        cloud = PointCloud(
            np.array([[-1.8, -1.8, -0.8, 0.0], [-1.7, -1.7, -0.7, 1.0]])
        )
        vox = voxelize(cloud, CFG)
        assert len(vox) == 1
        assert vox.counts[0] == 2
        assert_allclose(vox.features[0][0], 0.5)

    def test_upper_boundary_point_discarded(self):
        cloud = PointCloud(np.array([[2.0, 0.0, 0.0, 1.0]]))
        assert len(voxelize(cloud, CFG)) == 0

    def test_lower_boundary_point_kept(self):
        cloud = PointCloud(np.array([[-2.0, -2.0, -1.0, 1.0]]))
        vox = voxelize(cloud, CFG)
        assert len(vox) == 1
        assert vox.indices[0].tolist() == [0, 0, 0]

    def test_empty_output_is_legal(self):
        cloud = PointCloud(np.array([[5.0, 5.0, 5.0, 1.0]]))
        vox = voxelize(cloud, CFG)
        assert len(vox) == 0
        assert vox.features.shape == (0, 4)

    def test_no_extra_columns(self):
        cloud = PointCloud(np.array([[0.1, 0.1, 0.1]]))
        vox = voxelize(cloud, CFG)
        assert vox.feature_dim == 3  # offsets only


class TestBulkProperties:
    def make_cloud(self, seed, n=1000):
        rng = np.random.default_rng(seed)
        pts = np.column_stack(
            [
                rng.uniform(-2.5, 2.5, n),
                rng.uniform(-2.5, 2.5, n),
                rng.uniform(-1.5, 1.5, n),
                rng.uniform(0, 1, n),
            ]
        )
        return PointCloud(pts)

    def test_matches_dense_grid_oracle(self):
        cloud = self.make_cloud(21)
        vox = voxelize(cloud, CFG)
        ridx, rcen, rfeat, rcnt = reference.voxelize_ref(cloud.points, CFG)
        assert np.array_equal(vox.indices, ridx)
        assert np.array_equal(vox.centers, rcen)
        assert np.array_equal(vox.features, rfeat)
        assert np.array_equal(vox.counts, rcnt)

    def test_permutation_invariance_bit_exact(self):
        cloud = self.make_cloud(22)
        rng = np.random.default_rng(99)
        vox = voxelize(cloud, CFG)
        for _ in range(3):
            shuffled = PointCloud(cloud.points[rng.permutation(cloud.count)])
            vox2 = voxelize(shuffled, CFG)
            assert vox.features.tobytes() == vox2.features.tobytes()
            assert vox.indices.tobytes() == vox2.indices.tobytes()
            assert vox.centers.tobytes() == vox2.centers.tobytes()
            assert vox.counts.tobytes() == vox2.counts.tobytes()

    def test_counts_conserve_in_range_points(self):
        cloud = self.make_cloud(23)
        vox = voxelize(cloud, CFG)
        lo = np.array(CFG.bounds[:3])
        hi = lo + np.array(CFG.grid_cells) * np.array(CFG.voxel_size)
        in_range = np.all((cloud.points[:, :3] >= lo) & (cloud.points[:, :3] < hi), axis=1)
        assert vox.counts.sum() == in_range.sum()

    def test_centers_strictly_inside_range(self):
        cloud = self.make_cloud(24)
        vox = voxelize(cloud, CFG)
        lo = np.array(CFG.bounds[:3])
        hi = np.array(CFG.bounds[3:])
        assert (vox.centers > lo).all()
        assert (vox.centers < hi).all()

    def test_lexicographic_cell_order(self):
        cloud = self.make_cloud(25)
        vox = voxelize(cloud, CFG)
        idx = vox.indices
        keys = (idx[:, 0] * CFG.grid_cells[1] + idx[:, 1]) * CFG.grid_cells[2] + idx[:, 2]
        assert (np.diff(keys) > 0).all()  # strictly increasing => unique too

    def test_offset_feature_is_mean_offset_from_center(self):
        cloud = self.make_cloud(26, n=200)
        vox = voxelize(cloud, CFG)
        # recompute for one voxel by hand
        target = vox.indices[len(vox) // 2]
        lo = np.array(CFG.bounds[:3])
        size = np.array(CFG.voxel_size)
        cell_lo = lo + target * size
        members = cloud.points[
            np.all(
                (cloud.points[:, :3] >= cell_lo) & (cloud.points[:, :3] < cell_lo + size),
                axis=1,
            )
        ]
        center = cell_lo + size / 2
        expected = np.concatenate(
            [[members[:, 3].mean()], (members[:, :3] - center).mean(axis=0)]
        )
        assert_allclose(vox.features[len(vox) // 2], expected, atol=1e-12)


def test_voxelset_rejects_mismatched_arrays():
    with pytest.raises(ValueError):
        VoxelSet(
            indices=np.zeros((2, 3), dtype=np.int64),
            centers=np.zeros((3, 3)),
            features=np.zeros((2, 4)),
            counts=np.ones(2, dtype=np.int64),
        )
