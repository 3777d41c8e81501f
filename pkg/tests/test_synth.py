"""Synthetic scene generator and attention emission."""

import numpy as np
import pytest
import scipy.sparse as sp

from chain4d.archive import read_archive, write_archive
from chain4d.chain import ChainConfig, chain_all
from chain4d.errors import ValidationError
from chain4d.geom import RowStochasticMap
from chain4d.pnp import project, project_depths
from chain4d.rollout import reinforce
from chain4d.synth import (
    NoiseSchedule,
    SyntheticBackbone,
    emit_attention,
    emit_patch_attention,
    generate_scene,
    scene_kinds,
)
from chain4d.tracking import (
    PatchGrid,
    bridge_patch_to_vertex,
    track2d,
)


@pytest.fixture(scope="module")
def orbit_scene():
    return generate_scene("rigid-orbit", 8, seed=11, vertex_budget=800)


@pytest.fixture(scope="module")
def orbit_traces(orbit_scene):
    traces, _ = emit_attention(orbit_scene, 128, 0.0)
    return traces


@pytest.fixture(scope="module")
def patch_scene():
    return generate_scene("rigid-orbit", 4, seed=3, vertex_budget=600)


@pytest.fixture(scope="module")
def patch_stack(patch_scene):
    grid = PatchGrid(32, 32, 16)
    return grid, emit_patch_attention(patch_scene, 96, grid)


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

class TestSceneGeneration:

    def test_frame0_is_identity_for_every_kind(self):
        for kind in scene_kinds():
            scene = generate_scene(kind, 5, seed=2, vertex_budget=300)
            assert np.array_equal(scene.vertices_at(0), scene.mesh.vertices)

    def test_hinge_fixed_link_stationary_bitwise(self):
        scene = generate_scene("hinge", 6, seed=4, vertex_budget=500)
        fixed = scene.mesh.vertices[:, 1] <= 0.45
        assert fixed.sum() > 50
        for f in range(6):
            moved = scene.vertices_at(f)
            assert np.array_equal(moved[fixed], scene.mesh.vertices[fixed])
        # and the moving link actually moves by the final frame
        assert np.abs(scene.vertices_at(5)[~fixed]
                      - scene.mesh.vertices[~fixed]).max() > 0.05

    def test_same_seed_is_bitwise_identical(self):
        a = generate_scene("bend", 4, seed=9, vertex_budget=400)
        b = generate_scene("bend", 4, seed=9, vertex_budget=400)
        assert np.array_equal(a.mesh.vertices, b.mesh.vertices)
        assert np.array_equal(a.mesh.faces, b.mesh.faces)
        assert np.array_equal(a.vertices_at(3), b.vertices_at(3))

    def test_different_seed_changes_jitter(self):
        a = generate_scene("bend", 4, seed=1, vertex_budget=400)
        b = generate_scene("bend", 4, seed=2, vertex_budget=400)
        assert not np.array_equal(a.mesh.vertices, b.mesh.vertices)

    def test_validation_errors(self):
        with pytest.raises(ValidationError):
            generate_scene("gallop", 4, seed=0)
        with pytest.raises(ValidationError):
            generate_scene("hinge", 0, seed=0)
        with pytest.raises(ValidationError):
            generate_scene("hinge", 4, seed=0, vertex_budget=8)
        scene = generate_scene("hinge", 4, seed=0, vertex_budget=300)
        with pytest.raises(ValidationError):
            scene.vertices_at(4)
        with pytest.raises(ValidationError):
            scene.vertices_at(-1)

    def test_mesh_is_closed_and_outward_oriented(self):
        scene = generate_scene("twist", 2, seed=5, vertex_budget=500)
        faces = scene.mesh.faces
        edges = {}
        for tri in faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        assert set(edges.values()) == {2}
        v = scene.mesh.vertices
        v0, v1, v2 = (v[faces[:, i]] for i in range(3))
        volume = np.einsum("ij,ij->", v0, np.cross(v1, v2)) / 6.0
        assert volume > 0.0

    def test_vertex_budget_respected(self):
        for budget in (300, 800, 2000):
            scene = generate_scene("hinge", 2, seed=1, vertex_budget=budget)
            n = scene.mesh.vertices.shape[0]
            assert abs(n - budget) / budget < 0.1

    def test_deformations_continuous_and_finite(self):
        for kind in scene_kinds():
            scene = generate_scene(kind, 9, seed=3, vertex_budget=300)
            prev = scene.vertices_at(0)
            for f in range(1, 9):
                cur = scene.vertices_at(f)
                assert np.all(np.isfinite(cur))
                step = np.linalg.norm(cur - prev, axis=1).max()
                assert step < 0.2 * scene.bbox_diagonal
                prev = cur

    def test_camera_sees_whole_motion(self):
        for kind in scene_kinds():
            scene = generate_scene(kind, 6, seed=7, vertex_budget=300)
            for f in range(6):
                px, depth = project_depths(
                    scene.vertices_at(f), scene.camera, scene.intrinsics)
                assert np.all(depth > 0)
                assert px[:, 0].min() >= 0 and px[:, 1].min() >= 0
                assert px[:, 0].max() <= scene.intrinsics.width
                assert px[:, 1].max() <= scene.intrinsics.height

    def test_deform_single_point_roundtrip(self, orbit_scene):
        p = np.array([0.1, 0.4, 0.05])
        out = orbit_scene.deform(3, p)
        assert out.shape == (3,)
        batch = orbit_scene.deform(3, p[None, :])
        assert np.array_equal(out, batch[0])


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

class TestNoiseSchedule:

    def test_effective_level_and_cap(self):
        sched = NoiseSchedule(level=0.3, drift=0.1)
        assert sched.effective(0) == pytest.approx(0.3)
        assert sched.effective(3) == pytest.approx(0.6)
        assert sched.effective(100) == pytest.approx(0.98)

    def test_validation(self):
        with pytest.raises(ValidationError):
            NoiseSchedule(level=-0.1)
        with pytest.raises(ValidationError):
            NoiseSchedule(level=1.5)
        with pytest.raises(ValidationError):
            NoiseSchedule(drift=-1.0)
        with pytest.raises(ValidationError):
            NoiseSchedule().effective(-1)


# ---------------------------------------------------------------------------
# Attention emission
# ---------------------------------------------------------------------------

class TestEmission:

    def test_static_scene_temporal_identity(self):
        scene = generate_scene("hinge", 4, seed=6, vertex_budget=300,
                               magnitude=0.0)
        traces, _ = emit_attention(scene, 48, 0.0, bundle=2)
        eye = np.eye(48)
        for tmap in traces[-1].temporal:
            dense = tmap.toarray() if tmap.is_sparse else np.asarray(tmap.data)
            assert np.abs(dense - eye).max() <= 1e-9

    def test_noiseless_chain_recovers_deformation_everywhere(
            self, orbit_scene, orbit_traces):
        trace = orbit_traces[-1]
        queries = np.arange(orbit_scene.mesh.vertices.shape[0])
        per_frame = chain_all(trace.anchor_map, trace.temporal,
                              trace.samples, queries, ChainConfig())
        worst = 0.0
        for f, corrs in zip(trace.frames, per_frame):
            gt = orbit_scene.vertices_at(f)
            pos = np.array([c.position for c in corrs])
            worst = max(worst, np.linalg.norm(pos - gt, axis=1).max())
        assert worst < 1e-3

    def test_noise_monotonically_degrades_chain(self):
        scene = generate_scene("rigid-orbit", 3, seed=8, vertex_budget=400)
        queries = np.arange(0, 400, 4)
        means = []
        for level in (0.1, 0.5, 0.9):
            traces, _ = emit_attention(scene, 64, level, bundle=8)
            trace = traces[-1]
            per_frame = chain_all(trace.anchor_map, trace.temporal,
                                  trace.samples, queries, ChainConfig(k=8))
            errs = []
            for f, corrs in zip(trace.frames, per_frame):
                gt = scene.vertices_at(f)[queries]
                pos = np.array([c.position for c in corrs])
                errs.append(np.linalg.norm(pos - gt, axis=1).mean())
            means.append(np.mean(errs))
        assert means[0] < means[1] < means[2]

    def test_all_emitted_maps_row_stochastic(self, orbit_traces):
        trace = orbit_traces[-1]
        for m in (trace.anchor_map, *trace.temporal,
                  *(s.token_attention for s in trace.samples)):
            dense = m.toarray() if m.is_sparse else np.asarray(m.data)
            assert np.all(dense >= 0)
            np.testing.assert_allclose(dense.sum(axis=1), 1.0, atol=1e-9)

    def test_sample_rows_share_l2_norm_per_frame(self, orbit_traces):
        for smp in orbit_traces[-1].samples:
            rows = np.asarray(smp.token_attention.data)
            norms = np.linalg.norm(rows, axis=1)
            assert norms.max() - norms.min() < 1e-9

    def test_bundle_repeats_locations(self, orbit_scene, orbit_traces):
        smp = orbit_traces[-1].samples[3]
        pts = smp.points.reshape(-1, 16, 3)
        assert np.all(pts == pts[:, :1, :])
        gt = orbit_scene.vertices_at(orbit_traces[-1].frames[3])
        assert np.array_equal(pts[:, 0, :], gt)

    def test_sparse_emission_stays_accurate(self):
        scene = generate_scene("rigid-orbit", 4, seed=12, vertex_budget=500)
        traces, _ = emit_attention(scene, 96, 0.0, sparse=True)
        trace = traces[-1]
        assert trace.samples[1].token_attention.is_sparse
        queries = np.arange(500)[:scene.mesh.vertices.shape[0]]
        per_frame = chain_all(trace.anchor_map, trace.temporal,
                              trace.samples, queries, ChainConfig())
        worst = 0.0
        for f, corrs in zip(trace.frames, per_frame):
            gt = scene.vertices_at(f)[queries]
            pos = np.array([c.position for c in corrs])
            worst = max(worst, np.linalg.norm(pos - gt, axis=1).max())
        assert worst < 1e-3

    def test_multi_step_noiseless_traces_share_maps(self, orbit_scene):
        traces, _ = emit_attention(orbit_scene, 64, 0.0, steps=3, bundle=2)
        assert [t.step for t in traces] == [1, 2, 3]
        assert traces[1].anchor_map is traces[0].anchor_map
        assert traces[2].temporal is traces[0].temporal

    def test_noisy_steps_differ(self):
        scene = generate_scene("hinge", 3, seed=1, vertex_budget=300)
        traces, _ = emit_attention(scene, 48, 0.4, steps=2, bundle=2)
        a = np.asarray(traces[0].temporal[1].data)
        b = np.asarray(traces[1].temporal[1].data)
        assert not np.array_equal(a, b)

    def test_emission_deterministic(self):
        scene = generate_scene("twist", 3, seed=5, vertex_budget=300)
        t1, _ = emit_attention(scene, 48, 0.3, bundle=2)
        t2, _ = emit_attention(scene, 48, 0.3, bundle=2)
        assert np.array_equal(np.asarray(t1[0].anchor_map.data),
                              np.asarray(t2[0].anchor_map.data))
        assert np.array_equal(np.asarray(t1[0].temporal[2].data),
                              np.asarray(t2[0].temporal[2].data))

    def test_validation_errors(self, orbit_scene):
        with pytest.raises(ValidationError):
            emit_attention(orbit_scene, 10_000, 0.0)
        with pytest.raises(ValidationError):
            emit_attention(orbit_scene, 64, 1.5)
        with pytest.raises(ValidationError):
            emit_attention(orbit_scene, 64, 0.0, steps=0)
        with pytest.raises(ValidationError):
            emit_attention(orbit_scene, 64, 0.0, bundle=0)
        with pytest.raises(ValidationError):
            emit_attention(orbit_scene, 1, 0.0)

    def test_archive_contents_and_roundtrip(self, tmp_path):
        scene = generate_scene("hinge", 3, seed=2, vertex_budget=300)
        traces, archive = emit_attention(scene, 48, 0.0, bundle=2,
                                         with_archive=True)
        assert archive is not None
        for name in ("A_va_za", "A_za_zf", "S_0000", "B_0002",
                     "anchor_vertices", "anchor_faces"):
            assert name in archive
        assert archive.groundtruth is not None
        assert "V_0002" in archive.groundtruth
        np.testing.assert_allclose(
            archive.groundtruth.f64("V_0001"), scene.vertices_at(1),
            atol=1e-6)
        path = tmp_path / "scene.npz"
        write_archive(archive, path)
        loaded = read_archive(path)
        assert archive.tensors_equal(loaded)

    def test_no_archive_by_default(self, orbit_traces, orbit_scene):
        _, archive = emit_attention(orbit_scene, 48, 0.0, bundle=2)
        assert archive is None


# ---------------------------------------------------------------------------
# Patch attention
# ---------------------------------------------------------------------------

class TestPatchAttention:

    def test_background_rows_uniform_and_flagged(self, patch_stack):
        grid, pa = patch_stack
        fg = pa.foreground[0]
        assert 0 < fg.sum() < fg.size
        rows = np.asarray(pa.anchor_rows.data)
        assert np.allclose(rows[~fg], 1.0 / rows.shape[1])
        assert rows[fg].max(axis=1).min() > 2.0 / rows.shape[1]

    def test_surface_points_reproject_to_centers(self, patch_scene,
                                                 patch_stack):
        grid, pa = patch_stack
        for f in range(patch_scene.frame_count):
            fg = pa.foreground[f]
            back = project(pa.surface_points[f][fg], patch_scene.camera,
                           patch_scene.intrinsics)
            assert np.abs(back - grid.centers()[fg]).max() < 1e-9

    def test_patch_on_site_projection_is_dominated_by_it(self, patch_scene,
                                                         patch_stack):
        grid, pa = patch_stack
        from chain4d.synth import _Emitter
        em = _Emitter(patch_scene, 96, bundle=1, sparse=False)
        sites = em.frame_sites(0)
        px, depth = project_depths(sites, patch_scene.camera,
                                   patch_scene.intrinsics)
        # pick the site whose projection lands closest to a patch center
        patches = np.array([grid.patch_at(p) for p in px])
        offsets = np.linalg.norm(px - grid.centers()[patches], axis=1)
        best = int(np.argmin(offsets))
        rows = np.asarray(pa.anchor_rows.data)
        assert pa.foreground[0][patches[best]]
        assert int(np.argmax(rows[patches[best]])) == best

    def test_bridge_accuracy_on_foreground(self, patch_scene, patch_stack):
        grid, pa = patch_stack
        traces, _ = emit_attention(patch_scene, 96, 0.0, bundle=1)
        vmap = traces[0].anchor_map
        fg = np.flatnonzero(pa.foreground[0])
        verts = patch_scene.mesh.vertices
        cam_depth = patch_scene.camera.transform(
            pa.surface_points[0][fg])[:, 2]
        patch_world = (2.0 * grid.patch_px
                       / (patch_scene.intrinsics.width
                          * patch_scene.intrinsics.focal)) * cam_depth
        ok = 0
        for i, p in enumerate(fg):
            v = bridge_patch_to_vertex(int(p), pa.anchor_rows, vmap)
            err = np.linalg.norm(verts[v] - pa.surface_points[0][p])
            ok += err <= 2.0 * patch_world[i]
        assert ok / fg.size >= 0.95

    def test_track2d_follows_projected_orbit(self, patch_scene, patch_stack):
        grid, pa = patch_stack
        rows = np.asarray(pa.anchor_rows.data)
        fg = np.flatnonzero(pa.foreground[0])
        # strongest foreground patch as the query
        query = int(fg[np.argmax(rows[fg].max(axis=1))])
        track = track2d(query, pa.anchor_rows, pa.temporal, pa.frame_rows,
                        grid=grid)
        anchor_pt = pa.surface_points[0][query]
        for f in range(patch_scene.frame_count):
            true_px = project(patch_scene.deform(f, anchor_pt),
                              patch_scene.camera, patch_scene.intrinsics)
            true_patch = grid.patch_at(true_px)
            tr, tc = divmod(int(track.patch_indices[f]), grid.width)
            gr, gc = divmod(true_patch, grid.width)
            assert max(abs(tr - gr), abs(tc - gc)) <= 1


# ---------------------------------------------------------------------------
# Backbone interface
# ---------------------------------------------------------------------------

class TestSyntheticBackbone:

    def test_run_step_applies_override_to_fresh_noise(self):
        scene = generate_scene("rigid-orbit", 4, seed=10, vertex_budget=300)
        from chain4d.rollout import ReinforcementSet
        bb = SyntheticBackbone(scene, 48, NoiseSchedule(level=0.4), bundle=2)
        plain = bb.run_step([0, 1, 2, 3], step=3)
        rset = ReinforcementSet(48)
        rset.add(1, 5, 7, 0.6)
        rset.add(2, 9, 9, 0.3)
        boosted = bb.run_step([0, 1, 2, 3], step=3, override=rset)
        for local in range(4):
            expected = reinforce(plain.temporal[local],
                                 rset.for_frame(local))
            got = np.asarray(boosted.temporal[local].data)
            assert np.array_equal(got, np.asarray(expected.data))
        # frame 1, row 5 actually changed
        before = np.asarray(plain.temporal[1].data)[5]
        after = np.asarray(boosted.temporal[1].data)[5]
        assert after[7] > before[7]

    def test_noiseless_override_is_noop(self):
        scene = generate_scene("rigid-orbit", 3, seed=10, vertex_budget=300)
        from chain4d.rollout import ReinforcementSet
        bb = SyntheticBackbone(scene, 48, NoiseSchedule(level=0.0), bundle=2)
        rset = ReinforcementSet(48)
        plain = bb.run_step([0, 1, 2], step=1)
        for t in range(48):
            tp = int(np.argmax(np.asarray(plain.temporal[2].data)[t]))
            rset.add(2, t, tp, 0.5)
        boosted = bb.run_step([0, 1, 2], step=1, override=rset)
        assert np.array_equal(np.asarray(plain.temporal[2].data),
                              np.asarray(boosted.temporal[2].data))

    def test_same_step_same_noise_draws(self):
        scene = generate_scene("hinge", 3, seed=4, vertex_budget=300)
        bb = SyntheticBackbone(scene, 48, NoiseSchedule(level=0.5), bundle=2)
        a = bb.run_step([0, 1, 2], step=2)
        b = bb.run_step([0, 1, 2], step=2)
        assert np.array_equal(np.asarray(a.temporal[1].data),
                              np.asarray(b.temporal[1].data))
        c = bb.run_step([0, 1, 2], step=3)
        assert not np.array_equal(np.asarray(a.temporal[1].data),
                                  np.asarray(c.temporal[1].data))

    def test_re_anchor_returns_frame_mesh_and_advances_window(self):
        scene = generate_scene("bend", 6, seed=4, vertex_budget=300)
        sched = NoiseSchedule(level=0.2, drift=0.1)
        bb = SyntheticBackbone(scene, 48, sched, bundle=2)
        assert bb.window_index == 0
        mesh, amap = bb.re_anchor(5)
        assert bb.window_index == 1
        assert np.array_equal(mesh.vertices, scene.vertices_at(5))
        assert np.array_equal(mesh.faces, scene.mesh.faces)
        assert amap.rows == mesh.vertices.shape[0]
        trace = bb.run_step([5, 4], step=1)
        assert trace.frames == (5, 4)
