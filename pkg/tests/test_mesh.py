"""Mesh processing tests: smoothing, UV baking, displacement application.

The analytic plane and sphere constructions act as oracles: footprints,
radii, and restored positions are known in closed form.
"""

import numpy as np
import pytest

from facedetail.errors import InvalidInputError, TopologyError
from facedetail.mesh import (
    DetailMesh,
    apply_displacement,
    bake_displacement,
    build_zone_sphere,
    laplacian_smooth,
    load_obj,
    midpoint_subdivide,
    save_obj,
    sample_map_bilinear,
    umbrella_energy,
)
from facedetail.raster import DisplacementMap


def build_plane(n, uv_mode="corner"):
    """Unit grid plane with +z normals; UVs at corners or texel centers."""
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], 1)
    if uv_mode == "texel":
        us = (np.arange(n) + 0.5) / n
        uu, vv = np.meshgrid(us, us, indexing="ij")
        uvs = np.stack([uu.ravel(), vv.ravel()], 1)
    else:
        uvs = np.stack([xs.ravel(), ys.ravel()], 1)
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            b = a + 1
            c = a + n
            d = c + 1
            tris.append((a, c, b))
            tris.append((b, c, d))
    return DetailMesh(verts, np.array(tris), uvs)


def flat_map(width, value=0.0):
    return DisplacementMap(np.full((width, width), value, np.float32))


class TestDetailMesh:
    def test_plane_normals_are_plus_z(self):
        p = build_plane(6)
        assert np.allclose(p.normals, [0.0, 0.0, 1.0], atol=1e-12)

    def test_sphere_normals_point_radially_outward(self):
        s = build_zone_sphere(17, 32)
        radial = s.vertices / np.linalg.norm(s.vertices, axis=1, keepdims=True)
        dots = np.sum(s.normals * radial, axis=1)
        assert dots.min() > 0.99

    def test_triangle_index_out_of_range(self):
        with pytest.raises(TopologyError):
            DetailMesh(np.zeros((3, 3)), [[0, 1, 5]], np.zeros((3, 2)))

    def test_uv_out_of_bounds(self):
        with pytest.raises(InvalidInputError):
            DetailMesh(
                [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
                [[0, 1, 2]],
                [[0, 0], [1.5, 0], [0, 1]],
            )

    def test_degenerate_uv_triangle(self):
        with pytest.raises(TopologyError):
            DetailMesh(
                [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
                [[0, 1, 2]],
                [[0.2, 0.2], [0.2, 0.2], [0.5, 0.5]],
            )

    def test_isolated_vertex_is_allowed(self):
        mesh = DetailMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]],
            [[0, 1, 2]],
            [[0, 0], [1, 0], [0, 1], [0.5, 0.5]],
        )
        assert np.allclose(mesh.normals[3], [0, 0, 1])

    def test_edges_of_two_triangle_square(self):
        p = build_plane(2)
        assert len(p.edges()) == 5

    def test_vertices_are_readonly(self):
        p = build_plane(3)
        with pytest.raises(ValueError):
            p.vertices[0, 0] = 9.0


class TestLaplacianSmooth:
    def test_noisy_plane_amplitude_decreases_monotonically(self):
        rng = np.random.default_rng(0)
        p = build_plane(20)
        noisy = p.with_vertices(
            np.column_stack([p.vertices[:, 0], p.vertices[:, 1], 0.01 * rng.standard_normal(p.n_vertices)])
        )
        prev = np.abs(noisy.vertices[:, 2]).max()
        m = noisy
        for _ in range(10):
            m = laplacian_smooth(m, 1, 0.5)
            cur = np.abs(m.vertices[:, 2]).max()
            assert cur <= prev + 1e-15
            prev = cur

    def test_flat_grid_interior_is_fixed_point(self):
        # interior vertices already equal their neighbor means, so one pass
        # leaves them in place (later passes would leak the boundary shrink
        # inward, which is expected behavior, not drift)
        p = build_plane(8)
        out = laplacian_smooth(p, 1, 0.5)
        n = 8
        interior = [i * n + j for i in range(1, n - 1) for j in range(1, n - 1)]
        assert np.abs(out.vertices[interior] - p.vertices[interior]).max() < 1e-9

    def test_step_zero_is_identity(self):
        s = build_zone_sphere(9, 16)
        out = laplacian_smooth(s, 3, 0.0)
        assert np.array_equal(out.vertices, s.vertices)

    def test_umbrella_energy_strictly_decreases(self):
        for mesh in (build_zone_sphere(25, 48), build_plane(12)):
            rng = np.random.default_rng(2)
            m = mesh.with_vertices(mesh.vertices + 0.01 * rng.standard_normal(mesh.vertices.shape))
            prev = umbrella_energy(m)
            for _ in range(6):
                m = laplacian_smooth(m, 1, 0.5)
                cur = umbrella_energy(m)
                assert cur < prev
                prev = cur

    def test_isolated_vertex_unmoved(self):
        mesh = DetailMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]],
            [[0, 1, 2]],
            [[0, 0], [1, 0], [0, 1], [0.5, 0.5]],
        )
        out = laplacian_smooth(mesh, 4, 0.5)
        assert np.array_equal(out.vertices[3], [5, 5, 5])

    def test_parameter_validation(self):
        p = build_plane(3)
        with pytest.raises(InvalidInputError):
            laplacian_smooth(p, 0, 0.5)
        with pytest.raises(InvalidInputError):
            laplacian_smooth(p, 1, -0.1)
        with pytest.raises(InvalidInputError):
            laplacian_smooth(p, 1, 1.1)

    def test_connectivity_and_uvs_unchanged(self):
        s = build_zone_sphere(9, 16)
        out = laplacian_smooth(s, 2, 0.3)
        assert np.array_equal(out.triangles, s.triangles)
        assert np.array_equal(out.uvs, s.uvs)


class TestBakeDisplacement:
    def test_identical_meshes_bake_to_zero(self):
        p = build_plane(8)
        dm = bake_displacement(p, p, 64)
        assert np.all(dm.values == 0.0)

    def test_lifted_triangle_footprint(self):
        # one triangle raised by h: its own footprint reads exactly h, the
        # 1-ring blends in (0, h], everything beyond the ring stays zero
        p = build_plane(8)
        res, h, tsel = 64, 0.02, 25
        lifted = np.array(p.vertices)
        for vi in p.triangles[tsel]:
            lifted[vi, 2] += h
        dm = bake_displacement(p.with_vertices(lifted), p, res)
        vals = np.asarray(dm.values, np.float64)

        uv_px = p.uvs * res - 0.5
        gx, gy = np.meshgrid(np.arange(res), np.arange(res))

        def coverage(t_idx, tol):
            pa, pb, pc = uv_px[p.triangles[t_idx]]
            det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
            wb = ((gx - pa[0]) * (pc[1] - pa[1]) - (gy - pa[1]) * (pc[0] - pa[0])) / det
            wc = ((gy - pa[1]) * (pb[0] - pa[0]) - (gx - pa[0]) * (pb[1] - pa[1])) / det
            wa = 1 - wb - wc
            return (wa >= tol) & (wb >= tol) & (wc >= tol)

        inside = coverage(tsel, 1e-9)
        assert inside.sum() > 20
        assert np.abs(vals[inside] - h).max() < 1e-6

        ring_verts = set(p.triangles[tsel])
        far = np.ones((res, res), bool)
        for t in range(len(p.triangles)):
            if set(p.triangles[t]) & ring_verts:
                far &= ~coverage(t, -1e-7)
        assert np.abs(vals[far]).max() == 0.0
        ring = ~far & ~inside
        assert vals[ring].min() >= 0.0
        assert vals[ring].max() <= h + 1e-6

    def test_flipped_winding_negates_map(self):
        p = build_plane(8)
        rng = np.random.default_rng(3)
        lifted = np.array(p.vertices)
        lifted[:, 2] += 0.01 * rng.standard_normal(p.n_vertices)
        orig = p.with_vertices(lifted)
        dm = bake_displacement(orig, p, 64)
        p_flip = DetailMesh(p.vertices, p.triangles[:, ::-1], p.uvs)
        orig_flip = DetailMesh(lifted, p.triangles[:, ::-1], p.uvs)
        dm_flip = bake_displacement(orig_flip, p_flip, 64)
        assert np.allclose(dm_flip.values, -dm.values, atol=1e-7)

    def test_linearity_in_position_difference(self):
        p = build_plane(8)
        rng = np.random.default_rng(4)
        delta = 0.01 * rng.standard_normal((p.n_vertices, 3))
        one = bake_displacement(p.with_vertices(p.vertices + delta), p, 64)
        two = bake_displacement(p.with_vertices(p.vertices + 2 * delta), p, 64)
        assert np.allclose(
            np.asarray(two.values, np.float64), 2 * np.asarray(one.values, np.float64), atol=1e-6
        )

    def test_connectivity_mismatch_raises(self):
        p = build_plane(4)
        q = build_plane(5)
        with pytest.raises(TopologyError):
            bake_displacement(p, q, 64)

    def test_uv_mismatch_raises(self):
        p = build_plane(4)
        q = DetailMesh(p.vertices, p.triangles, np.clip(p.uvs * 0.9 + 0.05, 0, 1))
        with pytest.raises(TopologyError):
            bake_displacement(p, q, 64)


class TestApplyDisplacement:
    def test_zero_map_is_identity(self):
        s = build_zone_sphere(9, 16)
        out = apply_displacement(s, flat_map(64), 0)
        assert np.array_equal(out.vertices, s.vertices)

    def test_constant_map_on_unit_sphere_grows_radius(self):
        s = build_zone_sphere(49, 96)
        c = 0.05
        out = apply_displacement(s, flat_map(64, c), 0)
        radii = np.linalg.norm(out.vertices, axis=1)
        assert np.abs(radii - (1.0 + c)).max() < 1e-4

    def test_negative_subdiv_rejected(self):
        with pytest.raises(InvalidInputError):
            apply_displacement(build_plane(3), flat_map(64), -1)

    def test_midpoint_subdivide_counts(self):
        p = build_plane(4)
        n_edges = len(p.edges())
        sub = midpoint_subdivide(p)
        assert len(sub.triangles) == 4 * len(p.triangles)
        assert sub.n_vertices == p.n_vertices + n_edges

    def test_midpoint_subdivide_interpolates_uvs(self):
        p = build_plane(3)
        sub = midpoint_subdivide(p)
        # every new vertex is the average of some original edge pair
        for vi in range(p.n_vertices, sub.n_vertices):
            uv = sub.uvs[vi]
            assert 0.0 <= uv[0] <= 1.0 and 0.0 <= uv[1] <= 1.0

    def test_bilinear_at_texel_centers_is_exact(self):
        rng = np.random.default_rng(5)
        vals = rng.standard_normal((64, 64)).astype(np.float32)
        dm = DisplacementMap(vals)
        ij = rng.integers(0, 64, size=(50, 2))
        uvs = np.stack([(ij[:, 1] + 0.5) / 64, (ij[:, 0] + 0.5) / 64], 1)
        got = sample_map_bilinear(dm, uvs)
        assert np.allclose(got, vals[ij[:, 0], ij[:, 1]], atol=1e-7)


class TestRoundTrips:
    def test_texel_center_bake_apply_restores_positions(self):
        tp = build_plane(64, "texel")
        rng = np.random.default_rng(1)
        off = rng.uniform(-0.02, 0.02, tp.n_vertices)
        orig = tp.with_vertices(tp.vertices + off[:, None] * tp.normals)
        dm = bake_displacement(orig, tp, 64)
        back = apply_displacement(tp, dm, 0)
        assert np.abs(back.vertices - orig.vertices).max() < 1e-5

    def test_sphere_ridge_roundtrip_within_ten_percent(self):
        # displaced scan -> bake at 128 -> apply with 2 subdivisions: base
        # vertices away from the chart seams recover within 10% of the
        # ridge amplitude
        base = build_zone_sphere(49, 96)
        radial = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
        amp = 0.01
        ridge = np.exp(-((base.uvs[:, 1] - 0.5) ** 2) / (2 * 0.08**2))
        orig = base.with_vertices(base.vertices + amp * ridge[:, None] * radial)
        dm = bake_displacement(orig, base, 128)
        applied = apply_displacement(base, dm, 2)
        err = np.linalg.norm(applied.vertices[: base.n_vertices] - orig.vertices, axis=1)
        u, v = base.uvs[:, 0], base.uvs[:, 1]
        interior = (u > 0.03) & (u < 0.97) & (v > 0.05) & (v < 0.95)
        assert err[interior].max() < 0.1 * amp


class TestObjIO:
    def test_save_load_roundtrip(self, tmp_path):
        s = build_zone_sphere(9, 16)
        path = tmp_path / "zone.obj"
        save_obj(path, s)
        back = load_obj(path)
        assert np.allclose(back.vertices, s.vertices, atol=1e-6)
        assert np.allclose(back.uvs, s.uvs, atol=1e-6)
        assert np.array_equal(back.triangles, s.triangles)

    def test_quads_are_fan_triangulated(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
            "vt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\n"
            "f 1/1 2/2 3/3 4/4\n"
        )
        mesh = load_obj(path)
        assert len(mesh.triangles) == 2
        assert mesh.n_vertices == 4

    def test_face_without_vt_rejected(self, tmp_path):
        path = tmp_path / "plain.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
        with pytest.raises(TopologyError):
            load_obj(path)

    def test_ngon_rejected(self, tmp_path):
        path = tmp_path / "ngon.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0.5 1.5 0\nv 0 1 0\n"
            "vt 0 0\nvt 1 0\nvt 1 1\nvt 0.5 0.9\nvt 0 1\n"
            "f 1/1 2/2 3/3 4/4 5/5\n"
        )
        with pytest.raises(TopologyError):
            load_obj(path)

    def test_out_of_range_face_index(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nvt 0 0\nf 1/1 2/1 3/1\n")
        with pytest.raises(InvalidInputError):
            load_obj(path)

    def test_seam_vertex_is_split_per_uv(self, tmp_path):
        path = tmp_path / "seam.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\n"
            "vt 0 0\nvt 1 0\nvt 0 1\nvt 0.9 0.9\n"
            "f 1/1 2/2 3/3\nf 1/4 2/2 3/3\n"
        )
        mesh = load_obj(path)
        assert mesh.n_vertices == 4

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "c.obj"
        path.write_text(
            "# header\n\nv 0 0 0\nv 1 0 0\nv 0 1 0\n# uv block\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n"
        )
        assert load_obj(path).n_vertices == 3

    def test_no_faces_rejected(self, tmp_path):
        path = tmp_path / "empty.obj"
        path.write_text("v 0 0 0\nvt 0 0\n")
        with pytest.raises(TopologyError):
            load_obj(path)
