"""Shared synthetic problems for the solver tests."""

import numpy as np

from varslam.geometry import CameraIntrinsics, MapPoint, Observation, project_points, se3_exp
from varslam.sim import look_at
from varslam.solver import WindowProblem

INTR = CameraIntrinsics()


def make_window(seed=0, n_frames=3, n_points=40, noise=0.0, perturb=0.0, outliers=0.0,
                fixed=(0, 1)):
    """Cameras on an arc looking at a point cloud; returns (problem, gt poses, gt points).

    Frames in ``fixed`` keep their true pose and form the gauge; two fixed
    poses pin the monocular scale.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n_points, 3))
    poses = [look_at((3 * np.sin(a), 0.1 * k, -3 * np.cos(a)))
             for k, a in enumerate(np.linspace(-0.3, 0.3, n_frames))]
    obs = []
    for k, T in enumerate(poses):
        uv, _ = project_points(T.act(X), INTR)
        uv = uv + rng.normal(scale=noise, size=uv.shape)
        bad = rng.uniform(size=n_points) < outliers
        uv[bad] += rng.normal(scale=25.0, size=(int(bad.sum()), 2))
        obs += [Observation(i, k, uv[i]) for i in range(n_points)]
    init_poses = []
    for k, T in enumerate(poses):
        delta = np.zeros(6) if k in fixed else rng.normal(scale=perturb, size=6)
        init_poses.append((k, se3_exp(delta) @ T))
    init_pts = [MapPoint(i, X[i] + rng.normal(scale=perturb, size=3)) for i in range(n_points)]
    return WindowProblem(init_poses, init_pts, obs, INTR, frozenset(fixed)), poses, X
