import numpy as np
from hypothesis import given, settings, strategies as st

from anatomy_update.geom import (CameraIntrinsics, RigidTransform, TriangleMesh, backproject_pixel,
                                 look_at, pixel_rays, project_point)
from anatomy_update.phantom import DEFAULT_INTRINSICS, PhantomScene
from anatomy_update.render import render_depth_mesh, render_depth_volume
from anatomy_update.tsdf import extract_mesh, new_volume, volume_from_sdf

K = DEFAULT_INTRINSICS
I = RigidTransform.identity()


def icosphere(radius=10.0, center=(0, 0, 0), level=5):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(level):
        cache, nf = {}, []
        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius + np.asarray(center, float), np.array(f))


def ray_sphere_depth(T, K, center, radius):
    """Analytic z-depth of the first ray/sphere hit per pixel (0 on miss)."""
    d = pixel_rays(K).reshape(-1, 3)  # camera frame, z = 1
    c = T.apply(np.asarray(center, float)[None])[0]
    a = (d * d).sum(1)
    b = -2 * d @ c
    cc = c @ c - radius ** 2
    disc = b * b - 4 * a * cc
    t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
    return np.where((disc >= 0) & (t > 0), t, 0.0).reshape(K.shape)


def test_full_frustum_quad():
    z = 10.0
    s = 50.0
    quad = TriangleMesh([(-s, -s, z), (s, -s, z), (s, s, z), (-s, s, z)], [(0, 1, 2), (0, 2, 3)])
    M = render_depth_mesh(quad, I, K)
    assert M.valid.all()
    np.testing.assert_allclose(M.values, 10.0, atol=1e-5)


def test_empty_and_out_of_frustum():
    assert not render_depth_mesh(TriangleMesh(np.zeros((0, 3))), I, K).valid.any()
    far_side = TriangleMesh([(100, 100, 10), (101, 100, 10), (100, 101, 10)], [(0, 1, 2)])
    assert not render_depth_mesh(far_side, I, K).valid.any()
    behind = TriangleMesh([(-5, -5, -10), (5, -5, -10), (0, 5, -10)], [(0, 1, 2)])
    assert not render_depth_mesh(behind, I, K).valid.any()


def test_icosphere_matches_analytic():
    center = (1.0, -0.5, 0.0)
    mesh = icosphere(10.0, center)
    T = look_at((2.0, 1.0, -30.0), center)
    M = render_depth_mesh(mesh, T, K)
    ref = ray_sphere_depth(T, K, center, 10.0)
    both = M.valid & (ref > 0)
    assert both.sum() > 1000
    assert np.abs(M.values[both] - ref[both]).max() < 0.2
    # coverage agrees except along the silhouette
    assert (M.valid ^ (ref > 0)).sum() < 0.02 * both.sum()


def test_backfaces_seen_from_inside():
    M = render_depth_mesh(icosphere(10.0, level=3), I, K)
    assert M.valid.all()
    assert abs(M.values[int(K.cy), int(K.cx)] - 10.0) < 0.1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_depth_equals_vertex_z_at_vertex_pixels(seed):
    rng = np.random.default_rng(seed)
    T = RigidTransform.from_axis_angle(rng.standard_normal(3), rng.uniform(0, 0.3), rng.uniform(-2, 2, 3))
    us, vs = np.arange(20, 140, 8), np.arange(15, 105, 8)
    depth = rng.uniform(8.0, 12.0, (len(vs), len(us)))
    verts = np.array([backproject_pixel(T, K, (u, v), depth[j, i])
                      for j, v in enumerate(vs) for i, u in enumerate(us)])
    n = len(us)
    tris = []
    for j in range(len(vs) - 1):
        for i in range(n - 1):
            a = j * n + i
            tris += [(a, a + 1, a + n + 1), (a, a + n + 1, a + n)]
    mesh = TriangleMesh(verts, tris)
    M = render_depth_mesh(mesh, T, K)
    for X in verts[:: 7]:
        uv, z = project_point(T, K, X)
        u, v = np.rint(uv).astype(int)
        assert abs(M.values[v, u] - z) <= 1e-4 * z
    assert M.values.tobytes() == render_depth_mesh(mesh, T, K).values.tobytes()


def sphere_volume(center, r=10.0, vs=0.5):
    n = int(np.ceil(2 * (r + 3) / vs)) + 1
    origin = np.asarray(center) - (n - 1) * vs / 2
    return volume_from_sdf(lambda X: np.linalg.norm(X - center, axis=1) - r, (n, n, n), origin, vs, 1.0)


def test_volume_render_sphere():
    center = np.array([0.5, 0.0, 0.0])
    V = sphere_volume(center)
    T = look_at((0.0, 3.0, -28.0), center)
    M = render_depth_volume(V, T, K)
    ref = ray_sphere_depth(T, K, center, 10.0)
    both = M.valid & (ref > 0)
    assert both.sum() > 1000
    assert np.abs(M.values[both] - ref[both]).max() < V.voxel_size


def test_volume_render_unobserved_is_invalid():
    V = new_volume((20, 20, 20), (-5, -5, 5), 0.5, 1.0)
    V.D[...] = -1.0   # every voxel "inside", but none observed
    assert not render_depth_volume(V, I, K).valid.any()


def test_volume_and_mesh_renderers_agree_on_phantom():
    scene = PhantomScene()
    vs = 0.5
    lo = np.array([-11.0, -11.0, -20.0])
    dims = np.ceil((np.array([11.0, 11.0, 4.0]) - lo) / vs).astype(int) + 1
    V = volume_from_sdf(scene.sdf, dims, lo, vs, 1.0)
    mesh = extract_mesh(V)
    T = look_at((1.5, -1.0, -14.0), (0.0, 0.0, 0.0))
    Mm = render_depth_mesh(mesh, T, K)
    Mv = render_depth_volume(V, T, K)
    both = Mm.valid & Mv.valid
    assert both.sum() > 0.9 * Mm.valid.sum()
    assert np.mean(np.abs(Mm.values[both] - Mv.values[both]) < 0.5) >= 0.99
