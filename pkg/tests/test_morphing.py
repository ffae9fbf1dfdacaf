import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import grid_mesh, random_rotation, sphere_mesh
from craniosynth.exceptions import EmptyTarget, SingularSystem, ValidationError
from craniosynth.geometry import LandmarkSet, SimilarityTransform, TriangleMesh, apply_transform
from craniosynth.morphing import (MorphConfig, TemplateMorpher, closest_point_displacements, closest_points_on_mesh,
                                  cotangent_laplacian, establish_correspondence, lb_regularized_smooth)
from craniosynth.surrogate import SurrogateParams, generate_head, landmark_vertex_ids, template_head


def _segment_closest(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return a + t[:, None] * ab


def brute_closest(p, mesh):
    """Plane projection when it falls inside the triangle, else the best edge point; min over all triangles."""
    tri = mesh.vertices[mesh.triangles]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    q = p - np.einsum("ij,ij->i", p - a, n)[:, None] * n
    signs = np.stack([np.einsum("ij,ij->i", np.cross(x - q, y - q), n) for x, y in ((a, b), (b, c), (c, a))])
    inside = np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)
    P = np.broadcast_to(p, a.shape)
    cands = np.stack([q, _segment_closest(P, a, b), _segment_closest(P, b, c), _segment_closest(P, c, a)])
    d = np.linalg.norm(cands - p, axis=2)
    d[0, ~inside] = np.inf
    k, t = np.unravel_index(np.argmin(d), d.shape)
    return cands[k, t], d[k, t]


def loop_laplacian(mesh):
    """Dense cotangent Laplacian from per-triangle angles computed with arccos."""
    n = mesh.point_count
    w = np.zeros((n, n))
    v = mesh.vertices
    for tri in mesh.triangles:
        for k in range(3):
            o, i, j = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            u1, u2 = v[i] - v[o], v[j] - v[o]
            angle = np.arccos(np.clip(u1 @ u2 / np.linalg.norm(u1) / np.linalg.norm(u2), -1, 1))
            w[i, j] += 0.5 / np.tan(angle)
            w[j, i] += 0.5 / np.tan(angle)
    w = np.maximum(w, 0.0)
    return np.diag(w.sum(axis=1)) - w


def sphere_landmarks(mesh, level):
    ids = landmark_vertex_ids(level)
    return LandmarkSet({k: mesh.vertices[i] for k, i in ids.items()})


class TestMorphConfig:
    def test_defaults(self):
        cfg = MorphConfig()
        assert (cfg.stiffness_high, cfg.stiffness_low, cfg.iterations_per_pass) == (100.0, 1.0, 10)
        assert cfg.correspondence_rejection_distance == 10.0

    @pytest.mark.parametrize("kw", [dict(stiffness_high=1.0, stiffness_low=1.0), dict(stiffness_low=0.0),
                                    dict(iterations_per_pass=0), dict(correspondence_rejection_distance=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            MorphConfig(**kw)

    def test_json_round_trip(self, tmp_path):
        cfg = MorphConfig(50.0, 0.5, 3, 7.0, False)
        cfg.to_json(tmp_path / "m.json")
        assert MorphConfig.from_json(tmp_path / "m.json") == cfg


class TestClosestPoint:
    def test_matches_brute_force(self, rng):
        mesh = sphere_mesh(10.0, level=1)
        mesh = mesh.with_vertices(mesh.vertices * [1.0, 1.5, 0.7])
        pts = rng.normal(0, 12, size=(40, 3))
        closest, dist, _ = closest_points_on_mesh(pts, mesh)
        for p, c, d in zip(pts, closest, dist):
            bc, bd = brute_closest(p, mesh)
            assert d == pytest.approx(bd, abs=1e-10)
            assert np.allclose(c, bc, atol=1e-8)

    def test_self_is_zero(self):
        mesh = sphere_mesh(30.0, level=2)
        disp, valid = closest_point_displacements(mesh, mesh, 10.0)
        assert np.abs(disp).max() < 1e-12 and valid.all()

    def test_plane_offset(self):
        target = grid_mesh(9, 2.0)
        template = target.with_vertices(target.vertices + [0.0, 0.0, 3.0])
        disp, valid = closest_point_displacements(template, target, 10.0)
        assert valid.all()
        assert np.allclose(disp, [0.0, 0.0, -3.0], atol=1e-12)

    def test_rejection(self):
        target = grid_mesh(5)
        template = target.with_vertices(target.vertices + [0.0, 0.0, 50.0])
        disp, valid = closest_point_displacements(template, target, 10.0)
        assert not valid.any() and not disp.any()

    def test_empty_target(self):
        with pytest.raises(EmptyTarget):
            closest_point_displacements(grid_mesh(3), TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3))), 1.0)


class TestLaplacian:
    def test_matches_loop_oracle(self, rng):
        mesh = sphere_mesh(5.0, level=1)
        mesh = mesh.with_vertices(mesh.vertices + rng.normal(0, 0.2, mesh.vertices.shape))
        assert np.allclose(cotangent_laplacian(mesh).toarray(), loop_laplacian(mesh), atol=1e-10)

    def test_symmetric_psd_null_space(self):
        lap = cotangent_laplacian(sphere_mesh(level=2)).toarray()
        assert np.allclose(lap, lap.T)
        assert np.abs(lap @ np.ones(len(lap))).max() < 1e-12
        assert np.linalg.eigvalsh(lap).min() > -1e-10


class TestSmooth:
    def test_small_stiffness_is_identity(self, rng):
        mesh = sphere_mesh(10.0, level=2)
        raw = rng.normal(size=(mesh.point_count, 3))
        d = lb_regularized_smooth(mesh, raw, np.ones(mesh.point_count, bool), 1e-10)
        assert np.allclose(d, raw, atol=1e-8)

    @pytest.mark.parametrize("stiffness", [0.01, 1.0, 100.0])
    def test_constant_field_preserved(self, stiffness):
        mesh = sphere_mesh(10.0, level=2)
        raw = np.tile([1.0, -2.0, 0.5], (mesh.point_count, 1))
        d = lb_regularized_smooth(mesh, raw, np.ones(mesh.point_count, bool), stiffness)
        assert np.allclose(d, raw, atol=1e-9)

    @pytest.mark.parametrize("stiffness", [0.1, 1.0, 10.0, 1000.0])
    def test_half_masked_grid(self, stiffness):
        mesh = grid_mesh(5)
        mask = mesh.vertices[:, 0] < 2.0
        raw = np.where(mask[:, None], [0.3, -0.7, 1.1], 0.0)
        d = lb_regularized_smooth(mesh, raw, mask, stiffness)
        assert np.allclose(d[~mask], [0.3, -0.7, 1.1], atol=1e-9)

    def test_dense_solve_oracle(self, rng):
        mesh = grid_mesh(5)
        mask = rng.random(mesh.point_count) < 0.6
        mask[0] = True
        raw = rng.normal(size=(mesh.point_count, 3))
        system = np.diag(mask.astype(float)) + 3.0 * loop_laplacian(mesh)
        expected = np.linalg.solve(system, raw * mask[:, None])
        assert np.allclose(lb_regularized_smooth(mesh, raw, mask, 3.0), expected, atol=1e-9)

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        mesh = grid_mesh(4)
        mask = rng.random(mesh.point_count) < 0.7
        mask[0] = True
        f, g = rng.normal(size=(2, mesh.point_count, 3))
        lhs = lb_regularized_smooth(mesh, a * f + b * g, mask, 2.0)
        rhs = a * lb_regularized_smooth(mesh, f, mask, 2.0) + b * lb_regularized_smooth(mesh, g, mask, 2.0)
        assert np.allclose(lhs, rhs, atol=1e-8)

    def test_all_masked_is_singular(self):
        mesh = grid_mesh(3)
        with pytest.raises(SingularSystem):
            lb_regularized_smooth(mesh, np.zeros((9, 3)), np.zeros(9, bool), 1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            lb_regularized_smooth(grid_mesh(3), np.zeros((4, 3)), np.ones(4, bool), 1.0)


class TestCorrespondence:
    def test_self_registration_under_similarity(self, rng):
        template, tlms = template_head()
        t = SimilarityTransform(random_rotation(rng), 1.1, rng.normal(0, 10, 3))
        target = apply_transform(template, t)
        out = establish_correspondence(template, target, tlms, tlms.transformed(t))
        assert np.array_equal(out.triangles, template.triangles)
        assert np.sqrt(np.mean(np.sum((out.vertices - target.vertices) ** 2, axis=1))) < 0.1

    def test_bump_improves_after_pass_two(self):
        template, tlms = template_head()
        v = template.vertices
        top = v / np.linalg.norm(v, axis=1, keepdims=True)
        bump = 6.0 * np.exp(-((top[:, 2] - 1.0) ** 2) / 0.1)
        target = template.with_vertices(v + bump[:, None] * top)
        _, hist = establish_correspondence(template, target, tlms, tlms, return_history=True)
        assert hist["pass2"] < hist["pass1"]

    def test_sphere_onto_ellipsoid(self):
        level = 3
        target, tlms = template_head()
        sphere = sphere_mesh(74.0, level=level)
        out = establish_correspondence(sphere, target, sphere_landmarks(sphere, level), tlms)
        dists = [brute_closest(p, target)[1] for p in out.vertices]
        assert np.mean(dists) < 0.5

    def test_pass_two_not_worse_on_surrogate_heads(self):
        template, tlms = template_head()
        morpher = TemplateMorpher().fit(template, tlms)
        heads = [generate_head(k, SurrogateParams(), np.random.default_rng(k)) for k in range(4)]
        out = morpher.transform(heads)
        assert len(out) == 4
        for m, h in zip(out, morpher.history_):
            assert m.point_count == template.point_count
            assert h["pass2"] <= h["pass1"] + 1e-9

    def test_morpher_params(self):
        m = TemplateMorpher(stiffness_high=50.0)
        assert m.get_params()["stiffness_high"] == 50.0
        assert m.config.stiffness_high == 50.0
