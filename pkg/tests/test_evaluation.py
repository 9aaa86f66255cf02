import numpy as np
import pytest

from anatomy_update import evaluation
from anatomy_update.evaluation import (Box, ErrorStats, EvalProtocol, EvaluationError, align_gt,
                                       change_bbox, correspondence_error, correspondence_pairs,
                                       format_csv, format_table, report_table)
from anatomy_update.geom import RigidTransform, TriangleMesh, look_at
from anatomy_update.phantom import PhantomScene, carve_bite, gt_mesh, unchanged_poses

from test_render import icosphere


@pytest.fixture(scope="module")
def preop_mesh():
    return gt_mesh(PhantomScene(), 0.25)


def markers():
    return np.array([c for c, _ in PhantomScene().bumps], float)


def test_align_gt_identity(preop_mesh, K):
    m = markers()
    T, res = align_gt(preop_mesh, preop_mesh, list(zip(m, m)), unchanged_poses(PhantomScene()), K)
    np.testing.assert_allclose(T.matrix, np.eye(4), atol=1e-9)
    assert res < 1e-6


def test_align_gt_known_displacement(preop_mesh, K):
    rng = np.random.default_rng(3)
    d = rng.standard_normal(3)
    G = RigidTransform.from_axis_angle(rng.standard_normal(3), np.radians(2.0), d / np.linalg.norm(d))
    m = markers()
    T, res = align_gt(preop_mesh.transformed(G), preop_mesh, list(zip(G.apply(m), m)),
                      unchanged_poses(PhantomScene()), K)
    E = T @ G
    assert E.rotation_angle_deg() < 0.1
    assert np.linalg.norm(E.translation) < 0.05
    assert res < 0.05


def test_align_gt_errors(preop_mesh, K):
    m = markers()
    poses = unchanged_poses(PhantomScene())
    with pytest.raises(EvaluationError):
        align_gt(preop_mesh, preop_mesh, list(zip(m, m))[:2], poses, K)
    with pytest.raises(EvaluationError):
        align_gt(preop_mesh, preop_mesh, list(zip(m, m)), [], K)


def test_box_and_protocol_validation():
    with pytest.raises(EvaluationError):
        Box((0, 0, 0), (1, 1, 0))
    b = Box((0, 0, 0), (1, 2, 3))
    assert np.array_equal(b.extent, [1, 2, 3])
    assert list(b.contains([[0.5, 1, 1], [2, 1, 1]])) == [True, False]
    with pytest.raises(EvaluationError):
        EvalProtocol((), b)


def test_change_bbox_identical_meshes(preop_mesh):
    with pytest.raises(EvaluationError):
        change_bbox(preop_mesh, preop_mesh)


def carved_points(before, after, center, radius, n=20000, seed=0):
    X = np.asarray(center) + np.random.default_rng(seed).uniform(-radius, radius, (n, 3))
    return X[(before.sdf(X) < 0) & (after.sdf(X) > 0)]


def test_change_bbox_single_bite(preop_mesh):
    c, r, margin = (-1.0, 0.5, 1.2), 2.0, 1.0
    post = carve_bite(PhantomScene(), c, r)
    box = change_bbox(gt_mesh(post, 0.25), preop_mesh, margin)
    assert box.contains(carved_points(PhantomScene(), post, c, r)).all()
    assert np.all(box.extent <= 2 * (r + margin) + 2 * 0.5)


def test_change_bbox_contains_every_bite(dataset, protocol):
    for k in range(1, len(dataset.bites) + 1):
        before = dataset.preop_scene if k == 1 else dataset.bites[k - 2].scene
        c, r = dataset.bites[k - 1].scene.bites[-1]
        pts = carved_points(before, dataset.bites[k - 1].scene, c, r, seed=k)
        assert len(pts) > 100 and protocol.bbox.contains(pts).all()


def sphere_protocol(K):
    poses = (look_at((0, 0, -30.0), (0, 0, 0)), look_at((5, 3, -28.0), (0, 0, 0)))
    return EvalProtocol(poses, Box((-20, -20, -20), (20, 20, 20)))


def test_symmetry_is_exact(K):
    A = icosphere(10.0, level=3)
    s = correspondence_error(A, A, sphere_protocol(K), K)
    assert (s.mean, s.std) == (0.0, 0.0) and s.count > 1000


def test_offset_sphere_error(K):
    # a sphere 1 mm larger, seen head-on: pixel pairs sit about 1 mm apart near the center
    A, B = icosphere(11.0, level=5), icosphere(10.0, level=5)
    p = EvalProtocol((look_at((0, 0, -30.0), (0, 0, 0)),), Box((-3, -3, -11), (3, 3, -9)))
    s = correspondence_error(A, B, p, K)
    assert s.mean == pytest.approx(1.0, abs=0.1)
    with pytest.raises(EvaluationError):
        correspondence_error(A, B, EvalProtocol(p.eval_poses, Box((50, 50, 50), (51, 51, 51))), K)


def test_pose_set_stability(K):
    A, B = icosphere(10.5, level=4), icosphere(10.0, (0.3, 0, 0), level=4)
    p = sphere_protocol(K)
    first = correspondence_pairs(A, B, p.eval_poses[0], K, p.bbox)
    more = EvalProtocol(p.eval_poses + (look_at((-6, 0, -27.0), (0, 0, 0)),), p.bbox)
    assert np.array_equal(correspondence_pairs(A, B, more.eval_poses[0], K, more.bbox), first)
    assert correspondence_error(A, B, more, K).count > correspondence_error(A, B, p, K).count


def test_bbox_constant_across_steps(K, monkeypatch):
    seen = []
    real = evaluation.correspondence_pairs

    def spy(a, b, T, K, bbox):
        seen.append(bbox)
        return real(a, b, T, K, bbox)

    monkeypatch.setattr(evaluation, "correspondence_pairs", spy)
    A = icosphere(10.0, level=3)
    p = sphere_protocol(K)
    report_table([A, A, A], {"updated": [A, A, A]}, p, K, A)
    assert len(seen) == 3 * 2 * 2 and all(b is p.bbox for b in seen)


def test_report_blank_columns_and_empty():
    rows = [{"step": 1, "no_update": ErrorStats(2.0, 0.5, 10), "updated": None}]
    csv = format_csv(rows).splitlines()
    assert csv[0] == "step,variant,mean_mm,std_mm,count"
    assert csv[1] == "1,no_update,2.000000,0.500000,10"
    assert csv[2] == "1,updated,,," and csv[4] == "1,registration_ablation,,,"
    table = format_table(rows).splitlines()
    assert table[0].split() == ["step", "no_update", "updated", "depth_ablation", "registration_ablation"]
    assert table[1].split() == ["bite", "1", "2.000", "+/-", "0.500"]
    with pytest.raises(EvaluationError):
        report_table([], {}, None, None)


def test_report_ordering_on_phantom(report_rows):
    for row in report_rows:
        assert row["depth_ablation"].mean <= row["updated"].mean <= row["registration_ablation"].mean
    nu = [row["no_update"].mean for row in report_rows]
    assert np.all(np.diff(nu) > 0)
