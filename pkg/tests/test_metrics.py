"""Chamfer family, surface sampling, normal agreement, ICP."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chain4d.errors import ValidationError
from chain4d.geom import TriMesh
from chain4d.metrics import (
    chamfer3d,
    chamfer4d,
    chamfer_motion,
    chamfer_per_frame,
    format_geometry_report,
    icp_align,
    normal_consistency,
    sample_surface,
)

from conftest import octahedron, rotation_axis


def brute_chamfer(a, b):
    """Quadratic nearest-neighbor oracle, any dimension."""
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return 0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean()


def plane_mesh(flip=False):
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]])
    faces = np.array([[0, 2, 1], [0, 3, 2]]) if flip \
        else np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(verts, faces)


def sphere_mesh(levels=3):
    """Unit sphere: subdivided octahedron re-projected each level."""
    mesh = octahedron()
    verts = [v for v in mesh.vertices]
    faces = mesh.faces.tolist()
    for _ in range(levels):
        cache = {}
        new_faces = []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c],
                          [ab, bc, ca]]
        faces = new_faces
    return TriMesh(np.array(verts), np.array(faces))


def cube_mesh():
    v = np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0)
                  for z in (-1.0, 1.0)])
    f = np.array([
        [0, 1, 3], [0, 3, 2],      # x = -1
        [4, 6, 7], [4, 7, 5],      # x = +1
        [0, 4, 5], [0, 5, 1],      # y = -1
        [2, 3, 7], [2, 7, 6],      # y = +1
        [0, 2, 6], [0, 6, 4],      # z = -1
        [1, 5, 7], [1, 7, 3],      # z = +1
    ])
    return TriMesh(v, f)


class TestChamfer3d:
    def test_identical_clouds_zero(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(40, 3))
        assert chamfer3d(a, a) == 0.0

    def test_two_singletons_unit_apart(self):
        assert chamfer3d([[0.0, 0, 0]], [[1.0, 0, 0]]) == pytest.approx(1.0)

    def test_matches_quadratic_oracle_500_points(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(500, 3))
        b = rng.normal(size=(500, 3))
        assert chamfer3d(a, b) == pytest.approx(brute_chamfer(a, b),
                                                abs=1e-12)

    def test_symmetric_exact(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(60, 3))
        b = rng.normal(size=(45, 3))
        assert chamfer3d(a, b) == chamfer3d(b, a)

    def test_translation_of_both_clouds_invariant(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(30, 3))
        b = rng.normal(size=(30, 3))
        shift = np.array([12.0, -7.0, 3.0])
        assert chamfer3d(a + shift, b + shift) == pytest.approx(
            chamfer3d(a, b), abs=1e-12)

    @settings(deadline=None, max_examples=25)
    @given(st.integers(0, 10_000), st.integers(1, 40), st.integers(1, 40))
    def test_oracle_property(self, seed, na, nb):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(na, 3))
        b = rng.normal(size=(nb, 3))
        value = chamfer3d(a, b)
        assert value >= 0.0
        assert value == pytest.approx(brute_chamfer(a, b), abs=1e-12)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            chamfer3d(np.empty((0, 3)), np.ones((3, 3)))


class TestSequenceChamfer:
    def test_identical_sequences_zero(self):
        rng = np.random.default_rng(11)
        seq = rng.normal(size=(4, 25, 3))
        assert chamfer4d(seq, seq) == 0.0
        assert chamfer_motion(seq, seq) == 0.0

    def test_static_offset_separability(self):
        # unit-spaced grid, offset well under half the spacing: every
        # point's nearest neighbor is its own shifted twin
        axis = np.arange(3.0)
        cloud = np.stack(np.meshgrid(axis, axis, axis,
                                     indexing="ij"), axis=-1).reshape(-1, 3)
        pred = np.repeat(cloud[None], 5, axis=0)
        gt = pred + np.array([0.05, 0.0, 0.0])
        assert chamfer_motion(pred, gt) == pytest.approx(0.0, abs=1e-12)
        per_frame = chamfer_per_frame(pred, gt)
        assert np.allclose(per_frame, 0.05, atol=1e-12)

    def test_chamfer4d_matches_lifted_oracle(self):
        rng = np.random.default_rng(17)
        pred = rng.normal(size=(3, 20, 3))
        gt = rng.normal(size=(3, 18, 3))
        pooled = np.concatenate([pred.reshape(-1, 3), gt.reshape(-1, 3)])
        diag = np.linalg.norm(pooled.max(axis=0) - pooled.min(axis=0))

        def lift(seq):
            f, n, _ = seq.shape
            t = np.repeat(np.arange(f) / f, n) * diag
            return np.concatenate([seq.reshape(-1, 3), t[:, None]], axis=1)

        assert chamfer4d(pred, gt) == pytest.approx(
            brute_chamfer(lift(pred), lift(gt)), abs=1e-12)

    def test_chamfer_motion_matches_trajectory_oracle(self):
        rng = np.random.default_rng(19)
        pred = rng.normal(size=(4, 15, 3))
        gt = rng.normal(size=(4, 12, 3))

        def trajectories(seq):
            disp = seq - seq[0]
            return disp.transpose(1, 0, 2).reshape(seq.shape[1], -1)

        assert chamfer_motion(pred, gt) == pytest.approx(
            brute_chamfer(trajectories(pred), trajectories(gt)), abs=1e-12)

    def test_frame_count_mismatch_rejected(self):
        with pytest.raises(ValidationError, match="frame count"):
            chamfer4d(np.zeros((2, 4, 3)), np.zeros((3, 4, 3)))
        with pytest.raises(ValidationError, match="frame count"):
            chamfer_motion(np.zeros((2, 4, 3)), np.zeros((3, 4, 3)))


class TestSampleSurface:
    def test_samples_lie_on_surface_with_unit_normals(self):
        mesh = octahedron()
        pts, nrm = sample_surface(mesh, 500, seed=1)
        assert pts.shape == (500, 3)
        # every octahedron face satisfies |x|+|y|+|z| = 1
        assert np.allclose(np.abs(pts).sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(np.linalg.norm(nrm, axis=1), 1.0, atol=1e-12)

    def test_seeded_and_deterministic(self):
        mesh = octahedron()
        a = sample_surface(mesh, 100, seed=5)
        b = sample_surface(mesh, 100, seed=5)
        c = sample_surface(mesh, 100, seed=6)
        assert np.array_equal(a[0], b[0])
        assert not np.array_equal(a[0], c[0])

    def test_area_weighting_favors_big_faces(self):
        # one face 100x the area of the other
        verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0],
                          [10.0, 0, 1], [0.0, 10, 1], [10.0, 10, 1],
                          [20.0, 10, 1]])
        faces = np.array([[0, 1, 2], [3, 5, 4]])
        mesh = TriMesh(verts, faces)
        pts, _ = sample_surface(mesh, 2000, seed=7)
        big = np.sum(pts[:, 2] > 0.5)
        assert big / 2000 > 0.97

    def test_zero_area_face_never_sampled(self):
        verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0],
                          [2.0, 0, 0], [3.0, 0, 0]])
        faces = np.array([[0, 1, 2], [1, 3, 4]])   # second face collinear
        pts, nrm = sample_surface(TriMesh(verts, faces), 300, seed=3)
        assert np.all(np.isfinite(nrm))
        assert np.allclose(pts[:, 2].min(), 0.0)
        assert np.all(pts[:, 0] <= 1.0 + 1e-12)


class TestNormalConsistency:
    def test_mesh_vs_itself_is_one(self):
        mesh = octahedron()
        assert normal_consistency(mesh, mesh, samples=2000) == \
            pytest.approx(1.0, abs=1e-6)

    def test_flipped_plane_still_one(self):
        assert normal_consistency(plane_mesh(), plane_mesh(flip=True),
                                  samples=2000) == pytest.approx(1.0,
                                                                 abs=1e-6)

    def test_sphere_vs_cube_matches_sampled_oracle(self):
        sphere = sphere_mesh(levels=2)
        cube = cube_mesh()
        n = 2000
        value = normal_consistency(sphere, cube, samples=n, seed=0)

        pa, na = sample_surface(sphere, n, seed=0)
        pb, nb = sample_surface(cube, n, seed=0)

        def directed(p1, n1, p2, n2):
            d = ((p1[:, None, :] - p2[None, :, :]) ** 2).sum(axis=2)
            idx = np.argmin(d, axis=1)
            return np.mean(np.abs(np.einsum("nd,nd->n", n1, n2[idx])))

        oracle = 0.5 * (directed(pa, na, pb, nb) + directed(pb, nb, pa, na))
        assert value == pytest.approx(oracle, abs=1e-3)
        assert 0.0 <= value <= 1.0


class TestIcp:
    def test_identical_clouds_fixed_point(self):
        rng = np.random.default_rng(23)
        cloud = rng.normal(size=(80, 3))
        result = icp_align(cloud, cloud)
        assert np.allclose(result.rotation, np.eye(3), atol=1e-8)
        assert np.allclose(result.translation, 0.0, atol=1e-8)
        assert result.cost <= 1e-16

    def test_small_rigid_transform_recovered(self):
        rng = np.random.default_rng(29)
        cloud = rng.uniform(-1, 1, size=(300, 3))
        r_true = rotation_axis([0.3, 1.0, -0.2], np.deg2rad(4.0))
        t_true = np.array([0.03, -0.02, 0.04])
        target = cloud @ r_true.T + t_true
        result = icp_align(cloud, target, iterations=100)
        assert np.allclose(result.rotation, r_true, atol=1e-5)
        assert np.allclose(result.translation, t_true, atol=1e-5)
        assert np.allclose(result.transform(cloud), target, atol=1e-5)

    def test_cost_history_non_increasing(self):
        rng = np.random.default_rng(31)
        a = rng.normal(size=(60, 3))
        b = rng.normal(size=(50, 3)) + 0.5
        result = icp_align(a, b, iterations=40)
        assert np.all(np.diff(result.history) <= 1e-15)
        assert result.cost == result.history[-1]

    @settings(deadline=None, max_examples=20)
    @given(st.integers(0, 10_000))
    def test_monotone_on_random_input(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(rng.integers(3, 40), 3))
        b = rng.normal(size=(rng.integers(3, 40), 3))
        result = icp_align(a, b, iterations=15)
        assert np.all(np.diff(result.history) <= 1e-15)

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValidationError, match="empty"):
            icp_align(np.empty((0, 3)), np.ones((4, 3)))

    def test_rotation_stays_orthonormal(self):
        rng = np.random.default_rng(37)
        a = rng.normal(size=(25, 3))
        b = rng.normal(size=(30, 3))
        result = icp_align(a, b)
        assert np.allclose(result.rotation @ result.rotation.T, np.eye(3),
                           atol=1e-10)
        assert np.linalg.det(result.rotation) == pytest.approx(1.0)


class TestReport:
    def test_report_lists_frames_and_aggregates(self):
        text = format_geometry_report(np.array([0.1, 0.2]), 0.15, 0.05,
                                      normals=0.93)
        assert "frame 0000" in text and "frame 0001" in text
        assert "chamfer-4d 0.15" in text
        assert "chamfer-motion 0.05" in text
        assert "normal-consistency 0.93" in text
