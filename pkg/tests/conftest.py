"""Shared fixtures: a seed-0 phantom progression built once per session."""
import numpy as np
import pytest

from anatomy_update.dataset import build_dataset
from anatomy_update.evaluation import EvalProtocol, change_bbox, report_table
from anatomy_update.geom import PointCloud, look_at
from anatomy_update.phantom import DEFAULT_INTRINSICS, PhantomScene, hit_points
from anatomy_update.pipeline import UpdateConfig, build_preop, run_variant
from anatomy_update.tsdf import extract_mesh

ACCEPTANCE = []  # (criterion, passed, detail) lines collected by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def K():
    return DEFAULT_INTRINSICS


def surface_cloud(stride=2) -> np.ndarray:
    """Points on the preoperative phantom: the end wall plus two side-wall views.

    The side bumps break the corridor's rotational symmetry, without which
    rotation about its axis would be nearly unconstrained.
    """
    scene = PhantomScene()
    views = [((0.0, 0.0, -16.0), (0.0, 0.0, 0.0)),
             ((-2.0, 0.0, -26.0), (9.0, -1.0, -14.0)),
             ((2.0, 1.0, -27.0), (-8.0, 3.0, -9.0))]
    pts = []
    for eye, target in views:
        P, ok = hit_points(scene, look_at(eye, target), DEFAULT_INTRINSICS)
        pts.append(P[ok][::stride])
    return np.concatenate(pts)


@pytest.fixture(scope="session")
def cloud():
    return PointCloud(surface_cloud())


@pytest.fixture(scope="session")
def dataset():
    return build_dataset(n_frames=80, seed=0)


@pytest.fixture(scope="session")
def config():
    return UpdateConfig()


@pytest.fixture(scope="session")
def preop_volume(dataset, config):
    return build_preop(dataset.preop_frames, dataset.K, config)


def bite_inputs(dataset, n=None):
    return [{"estimated": b.frames(False)[:n], "rendered-ground-truth": b.frames(True)[:n]}
            for b in dataset.bites]


@pytest.fixture(scope="session")
def progression(dataset, preop_volume, config):
    """Every variant folded over the five bites, default (no reset) weights."""
    bites = bite_inputs(dataset)
    return {name: run_variant(preop_volume, bites, dataset.K, config, name)
            for name in ("updated", "depth_ablation", "registration_ablation")}


@pytest.fixture(scope="session")
def protocol(dataset):
    return EvalProtocol(tuple(dataset.eval_poses), change_bbox(dataset.gt_mesh(5), dataset.gt_mesh(0)))


@pytest.fixture(scope="session")
def report_rows(dataset, preop_volume, progression, protocol, config):
    """Error table of the seed-0 progression against the (already aligned) ground truth."""
    gts = [dataset.gt_mesh(k) for k in range(1, len(dataset.bites) + 1)]
    meshes = {name: [extract_mesh(V, config.min_weight) for V in run.volumes]
              for name, run in progression.items()}
    return report_table(gts, meshes, protocol, dataset.K, extract_mesh(preop_volume, config.min_weight))
