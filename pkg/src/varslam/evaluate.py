"""Trajectory I/O (TUM format), timestamp association, rigid alignment and
absolute trajectory error."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import IO, Iterable, List, Tuple

import numpy as np

from .errors import AlignmentError, AssociationError, InvalidArgumentError, TrajectoryParseError
from .geometry import SE3Pose

QUAT_UNIT_TOL = 1e-3


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses."""

    timestamps: np.ndarray
    poses: List[SE3Pose] = field(repr=False)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.poses) != self.timestamps.size:
            raise InvalidArgumentError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise InvalidArgumentError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    @classmethod
    def from_world_to_camera(cls, timestamps, poses_cw: Iterable[SE3Pose]) -> "Trajectory":
        """Build from solver-convention poses; file I/O is camera-to-world."""
        return cls(timestamps, [p.inverse() for p in poses_cw])


@dataclass
class AteResult:
    rmse: float
    mean: float
    median: float
    max: float
    per_sample_errors: np.ndarray = field(repr=False)
    alignment: SE3Pose = field(repr=False)
    pairs: List[Tuple[int, int]] = field(repr=False, default_factory=list)


# ---------------------------------------------------------------------------
# quaternions (x, y, z, w order as in TUM files)
# ---------------------------------------------------------------------------

def quat_to_rotation(q) -> np.ndarray:
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# TUM text format
# ---------------------------------------------------------------------------

def read_trajectory_tum(stream: IO[str], source: str | None = None) -> Trajectory:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; '#' lines are comments."""
    stamps, poses = [], []
    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise TrajectoryParseError(f"expected 8 fields, found {len(fields)}", lineno, source)
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise TrajectoryParseError(f"non-numeric field in {line!r}", lineno, source) from None
        if not np.all(np.isfinite(vals)):
            raise TrajectoryParseError("non-finite value", lineno, source)
        q = np.array(vals[4:])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > QUAT_UNIT_TOL:
            raise TrajectoryParseError(f"quaternion norm {norm:.6f} is not unit", lineno, source)
        if stamps and vals[0] <= stamps[-1]:
            raise TrajectoryParseError(
                f"timestamp {vals[0]} does not increase (previous {stamps[-1]})", lineno, source)
        stamps.append(vals[0])
        poses.append(SE3Pose(quat_to_rotation(q / norm), vals[1:4]))
    if not stamps:
        raise TrajectoryParseError("trajectory contains no samples", None, source)
    return Trajectory(np.array(stamps), poses)


def write_trajectory_tum(traj: Trajectory, stream: IO[str], digits: int = 9,
                         header: str | None = None) -> None:
    """Write in TUM format with ``digits`` significant digits for pose fields.

    Timestamps are written with fixed microsecond precision so large epoch
    stamps survive.
    """
    if header:
        for line in header.splitlines():
            stream.write(f"# {line}\n")
    fmt = f"{{:.{digits}g}}"
    for ts, pose in zip(traj.timestamps, traj.poses):
        q = rotation_to_quat(pose.rotation)
        vals = " ".join(fmt.format(v) for v in (*pose.translation, *q))
        stream.write(f"{ts:.6f} {vals}\n")


# ---------------------------------------------------------------------------
# association, alignment, ATE
# ---------------------------------------------------------------------------

def associate(gt: Trajectory, est: Trajectory, max_dt: float = 0.02) -> List[Tuple[int, int]]:
    """Greedy nearest-timestamp matching; returns (gt_index, est_index) pairs."""
    if not max_dt > 0:
        raise InvalidArgumentError("max_dt must be positive")
    a, b = gt.timestamps, est.timestamps
    candidates = []
    for i, ta in enumerate(a):
        lo = np.searchsorted(b, ta - max_dt, side="left")
        hi = np.searchsorted(b, ta + max_dt, side="right")
        for j in range(lo, hi):
            dt = abs(ta - b[j])
            if dt <= max_dt:
                candidates.append((dt, i, j))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    if not pairs:
        raise AssociationError(f"no timestamps match within {max_dt} s")
    pairs.sort()
    return pairs


def align_umeyama(gt_positions, est_positions) -> SE3Pose:
    """Rigid transform (no scale) minimizing sum |gt - (R est + t)|^2."""
    gt = np.asarray(gt_positions, dtype=float).reshape(-1, 3)
    est = np.asarray(est_positions, dtype=float).reshape(-1, 3)
    if gt.shape != est.shape:
        raise AlignmentError("position sets differ in size")
    if gt.shape[0] < 3:
        raise AlignmentError(f"need at least 3 positions, got {gt.shape[0]}")
    mu_g, mu_e = gt.mean(axis=0), est.mean(axis=0)
    dg, de = gt - mu_g, est - mu_e
    scale = max(np.abs(dg).max(), np.abs(de).max(), 1e-300)
    for d in (dg, de):
        sv = np.linalg.svd(d, compute_uv=False)
        if sv[1] <= 1e-9 * scale * np.sqrt(d.shape[0]):
            raise AlignmentError("positions are collinear or coincident")
    U, _, Vt = np.linalg.svd(dg.T @ de)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return SE3Pose(R, mu_g - R @ mu_e)


def ate_rmse(gt: Trajectory, est: Trajectory, align: bool = True,
             max_dt: float = 0.02) -> AteResult:
    pairs = associate(gt, est, max_dt)
    gi = [i for i, _ in pairs]
    ei = [j for _, j in pairs]
    gp = gt.positions[gi]
    ep = est.positions[ei]
    T = SE3Pose.identity()
    errors = np.linalg.norm(gp - ep, axis=1)
    if align:
        fitted = align_umeyama(gp, ep)
        fitted_errors = np.linalg.norm(gp - fitted.act(ep), axis=1)
        # the identity is also a rigid transform; keep it unless the fit beats it
        if np.sum(fitted_errors ** 2) < np.sum(errors ** 2):
            T, errors = fitted, fitted_errors
    return AteResult(
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        mean=float(np.mean(errors)),
        median=float(np.median(errors)),
        max=float(np.max(errors)),
        per_sample_errors=errors,
        alignment=T,
        pairs=pairs,
    )
