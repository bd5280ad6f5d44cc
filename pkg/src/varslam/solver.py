"""IRLS / Levenberg-Marquardt pose tracking and windowed bundle adjustment.

Three kernels are supported: the fixed Huber baseline, Barron's loss with a
fixed shape, and Barron's loss whose shape is re-estimated from the current
residuals before every outer iteration (alternating minimization over the
state and alpha). All residuals are whitened, so Barron runs at c = 1.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import kernel
from .alpha import estimate_alpha, nll
from .errors import InvalidArgumentError, ObservabilityError, StructuralError
from .geometry import CameraIntrinsics, MapPoint, Observation, SE3Pose, batch_residuals, se3_exp
from .kernel import AlphaGrid, PartitionTable

MAX_LAMBDA = 1e12
MIN_LAMBDA = 1e-12
COST_FLOOR = 1e-20   # costs below this count as exactly solved
STEP_TOL = 1e-10     # parameter-step norm treated as converged


# ---------------------------------------------------------------------------
# kernel modes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Huber:
    delta: float = 1.345

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidArgumentError("Huber delta must be positive")


@dataclass(frozen=True)
class BarronFixed:
    alpha: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        kernel.KernelParams(self.alpha, self.c)


@dataclass(frozen=True)
class BarronAdaptive:
    grid: AlphaGrid = AlphaGrid()
    c: float = 1.0


KernelMode = Union[Huber, BarronFixed, BarronAdaptive]


def _huber_rho(e: np.ndarray, delta: float) -> np.ndarray:
    return np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))


def robust_cost(residual_magnitudes, mode: KernelMode, alpha_current: float | None = None) -> float:
    """Sum of per-residual losses under the active kernel."""
    e = np.asarray(residual_magnitudes, dtype=float).ravel()
    if e.size == 0:
        return 0.0
    if np.any(e < 0):
        raise InvalidArgumentError("residual magnitudes must be non-negative")
    if isinstance(mode, Huber):
        return float(np.sum(_huber_rho(e, mode.delta)))
    alpha, c = _barron_shape(mode, alpha_current)
    return float(np.sum(kernel.rho(e, alpha, c)))


def irls_weights(residual_magnitudes, mode: KernelMode, alpha_current: float | None = None) -> np.ndarray:
    e = np.asarray(residual_magnitudes, dtype=float).ravel()
    if isinstance(mode, Huber):
        safe = np.maximum(e, 1e-300)
        return np.where(e <= mode.delta, 1.0, mode.delta / safe)
    alpha, c = _barron_shape(mode, alpha_current)
    return np.asarray(kernel.weight(e, alpha, c))


def _barron_shape(mode: KernelMode, alpha_current: float | None) -> Tuple[float, float]:
    if isinstance(mode, BarronFixed):
        return mode.alpha, mode.c
    if alpha_current is None:
        raise InvalidArgumentError("adaptive kernel needs the current alpha")
    return alpha_current, mode.c


def classify_outliers(residual_magnitudes, threshold: float) -> np.ndarray:
    """Chi-square gate on whitened magnitudes: e^2 > threshold."""
    if not threshold > 0:
        raise InvalidArgumentError("outlier threshold must be positive")
    e = np.asarray(residual_magnitudes, dtype=float)
    return e * e > threshold


# ---------------------------------------------------------------------------
# problem / report types
# ---------------------------------------------------------------------------

@dataclass
class SolverConfig:
    max_outer_iterations: int = 10
    max_inner_iterations: int = 10
    lm_initial_lambda: float = 1e-4
    lm_lambda_factor: float = 10.0
    rel_cost_tolerance: float = 1e-8
    alpha_init: float = 2.0
    outlier_chi2_threshold: float = 5.991
    remove_outliers: bool = False
    alpha_update: str = "outer"   # "outer": once per outer iteration; "inner": before every LM step

    def validate(self) -> None:
        for name in ("max_outer_iterations", "max_inner_iterations", "lm_initial_lambda",
                     "lm_lambda_factor", "rel_cost_tolerance", "outlier_chi2_threshold"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"solver.{name} must be positive")
        if not self.rel_cost_tolerance < 1:
            raise InvalidArgumentError("solver.rel_cost_tolerance must be < 1")
        if not self.lm_lambda_factor > 1:
            raise InvalidArgumentError("solver.lm_lambda_factor must exceed 1")
        if self.alpha_init > 2:
            raise InvalidArgumentError("solver.alpha_init must be <= 2")
        if self.alpha_update not in ("outer", "inner"):
            raise InvalidArgumentError("solver.alpha_update must be 'outer' or 'inner'")


@dataclass
class TrackingProblem:
    initial_pose: SE3Pose
    fixed_points: Sequence[MapPoint]
    observations: Sequence[Observation]
    intrinsics: CameraIntrinsics


@dataclass
class WindowProblem:
    """Local BA instance. ``fixed_frames`` defaults to the first keyframe."""

    keyframes: Sequence[Tuple[int, SE3Pose]]
    points: Sequence[MapPoint]
    observations: Sequence[Observation]
    intrinsics: CameraIntrinsics
    fixed_frames: Optional[frozenset] = None

    @property
    def gauge(self) -> frozenset:
        if self.fixed_frames is not None:
            return frozenset(self.fixed_frames)
        return frozenset([self.keyframes[0][0]]) if self.keyframes else frozenset()


@dataclass
class WindowSolution:
    poses: Dict[int, SE3Pose]
    points: Dict[int, np.ndarray]


@dataclass
class SolveReport:
    final_cost: float = 0.0
    cost_trace: List[float] = field(default_factory=list)
    alpha_trace: List[float] = field(default_factory=list)
    lambda_trace: List[float] = field(default_factory=list)
    # (outer iteration, cost, alpha, lambda) per accepted step; alpha is nan for Huber
    history: List[Tuple[int, float, float, float]] = field(default_factory=list)
    # (nll with previous alpha, nll after the update) at fixed state, adaptive mode
    nll_trace: List[Tuple[float, float]] = field(default_factory=list)
    iterations_used: int = 0
    outlier_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    converged: bool = False
    final_alpha: float = float("nan")

    def to_table(self) -> str:
        lines = ["iteration,cost,alpha,lambda"]
        for i, (_, cost, alpha, lam) in enumerate(self.history):
            lines.append(f"{i},{cost:.12g},{alpha:.4g},{lam:.6g}")
        return "\n".join(lines) + "\n"

    def _record(self, outer: int, cost: float, alpha: float, lam: float) -> None:
        self.cost_trace.append(cost)
        self.lambda_trace.append(lam)
        self.history.append((outer, cost, alpha, lam))


# ---------------------------------------------------------------------------
# pose-only optimization (tracking)
# ---------------------------------------------------------------------------

def _track_arrays(problem: TrackingProblem):
    lookup = {p.id: p.position for p in problem.fixed_points}
    try:
        X = np.array([lookup[o.point_id] for o in problem.observations]).reshape(-1, 3)
    except KeyError as exc:
        raise StructuralError(f"observation references unknown point {exc}") from None
    px = np.array([o.pixel for o in problem.observations]).reshape(-1, 2)
    sig = np.array([o.sigma for o in problem.observations], dtype=float)
    return X, px, sig


def optimize_pose(problem: TrackingProblem, mode: KernelMode = BarronFixed(1.0),
                  config: SolverConfig | None = None) -> Tuple[SE3Pose, SolveReport]:
    """Refine one camera pose against fixed map points."""
    config = config or SolverConfig()
    config.validate()
    if isinstance(mode, BarronAdaptive):
        raise InvalidArgumentError("pose tracking uses a fixed kernel; adaptive alpha is for windows")
    X, px, sig = _track_arrays(problem)
    return _optimize_pose_arrays(problem.initial_pose, X, px, sig, problem.intrinsics, mode, config)


def _optimize_pose_arrays(pose: SE3Pose, X, px, sig, intr, mode, config):
    alpha = mode.alpha if isinstance(mode, BarronFixed) else float("nan")

    def evaluate(T: SE3Pose, jac: bool):
        n = len(X)
        R = np.broadcast_to(T.rotation, (n, 3, 3))
        t = np.broadcast_to(T.translation, (n, 3))
        return batch_residuals(R, t, X, px, sig, intr, jacobians=jac)

    r, valid, J, _ = evaluate(pose, True)
    if int(valid.sum()) < 6:
        raise ObservabilityError(f"pose needs >= 6 usable observations, got {int(valid.sum())}")

    report = SolveReport(final_alpha=alpha)
    e = np.linalg.norm(r, axis=1)
    cost = robust_cost(e[valid], mode)
    lam = config.lm_initial_lambda
    report._record(0, cost, alpha, lam)
    max_iter = config.max_outer_iterations * config.max_inner_iterations

    for it in range(max_iter):
        if cost <= COST_FLOOR:
            report.converged = True
            break
        w2 = np.repeat(irls_weights(e, mode) * valid, 2)
        Jf = J.reshape(-1, 6)
        H = Jf.T @ (w2[:, None] * Jf)
        g = Jf.T @ (w2 * r.reshape(-1))
        accepted = False
        while lam <= MAX_LAMBDA:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= config.lm_lambda_factor
                continue
            trial = se3_exp(delta) @ pose
            r_t, valid_t, J_t, _ = evaluate(trial, True)
            if np.any(valid & ~valid_t):
                lam *= config.lm_lambda_factor
                continue
            e_t = np.linalg.norm(r_t, axis=1)
            cost_t = robust_cost(e_t[valid], mode)
            if cost_t <= cost:
                accepted = True
                break
            lam *= config.lm_lambda_factor
        report.iterations_used = it + 1
        if not accepted:
            break
        decrease = cost - cost_t
        pose, r, J, e, cost = trial, r_t, J_t, e_t, cost_t
        lam = max(lam / config.lm_lambda_factor, MIN_LAMBDA)
        report._record(0, cost, alpha, lam)
        if (np.linalg.norm(delta) < STEP_TOL or cost <= COST_FLOOR
                or decrease <= config.rel_cost_tolerance * max(cost + decrease, 1e-300)):
            report.converged = True
            break

    report.final_cost = cost
    flags = np.zeros(len(X), dtype=bool)
    flags[valid] = classify_outliers(e[valid], config.outlier_chi2_threshold)
    flags[~valid] = True
    report.outlier_flags = flags
    return pose, report


# ---------------------------------------------------------------------------
# windowed bundle adjustment
# ---------------------------------------------------------------------------

class _Window:
    """Index bookkeeping for a window problem."""

    def __init__(self, problem: WindowProblem):
        kf_ids = [fid for fid, _ in problem.keyframes]
        if len(set(kf_ids)) != len(kf_ids):
            raise StructuralError("duplicate keyframe ids in window")
        if not kf_ids:
            raise StructuralError("window has no keyframes")
        gauge = problem.gauge
        if not gauge or not gauge <= set(kf_ids):
            raise StructuralError("gauge keyframes must be members of the window")
        pt_ids = [p.id for p in problem.points]
        if len(set(pt_ids)) != len(pt_ids):
            raise StructuralError("duplicate point ids in window")

        self.frame_ids = kf_ids
        self.fixed = np.array([fid in gauge for fid in kf_ids])
        self.free_index = -np.ones(len(kf_ids), dtype=int)
        self.free_index[~self.fixed] = np.arange(int((~self.fixed).sum()))
        self.n_free = int((~self.fixed).sum())
        fpos = {fid: i for i, fid in enumerate(kf_ids)}
        ppos = {pid: i for i, pid in enumerate(pt_ids)}

        obs = problem.observations
        try:
            self.obs_frame = np.array([fpos[o.frame_id] for o in obs], dtype=int)
        except KeyError as exc:
            raise StructuralError(f"observation references unknown keyframe {exc}") from None
        try:
            self.obs_point = np.array([ppos[o.point_id] for o in obs], dtype=int)
        except KeyError as exc:
            raise StructuralError(f"observation references unknown point {exc}") from None
        self.pixels = np.array([o.pixel for o in obs]).reshape(-1, 2)
        self.sigmas = np.array([o.sigma for o in obs], dtype=float)
        self.n_points = len(pt_ids)
        self.point_ids = pt_ids

        counts = np.bincount(self.obs_point, minlength=self.n_points)
        if np.any(counts < 2):
            bad = pt_ids[int(np.flatnonzero(counts < 2)[0])]
            raise StructuralError(f"point {bad} has fewer than two observations")
        self._check_connected()

    def _check_connected(self) -> None:
        nf = len(self.frame_ids)
        frame_pts: List[List[int]] = [[] for _ in range(nf)]
        point_frames: List[List[int]] = [[] for _ in range(self.n_points)]
        for f, p in zip(self.obs_frame, self.obs_point):
            frame_pts[f].append(p)
            point_frames[p].append(f)
        seen_f = set(np.flatnonzero(self.fixed).tolist())
        seen_p = set()
        queue = deque(seen_f)
        while queue:
            f = queue.popleft()
            for p in frame_pts[f]:
                if p in seen_p:
                    continue
                seen_p.add(p)
                for g in point_frames[p]:
                    if g not in seen_f:
                        seen_f.add(g)
                        queue.append(g)
        if len(seen_f) != nf or len(seen_p) != self.n_points:
            raise StructuralError("observation graph is not connected to the fixed keyframes")


def _window_eval(win: _Window, Rs, ts, X, intr, jac: bool):
    R = Rs[win.obs_frame]
    t = ts[win.obs_frame]
    return batch_residuals(R, t, X[win.obs_point], win.pixels, win.sigmas, intr, jacobians=jac)


def _scatter_sum(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets (a fast ``np.add.at``)."""
    flat = values.reshape(len(values), -1)
    k = flat.shape[1]
    slots = (index[:, None] * k + np.arange(k)).ravel()
    out = np.bincount(slots, weights=flat.ravel(), minlength=n * k)
    return out.reshape((n,) + values.shape[1:])


def _window_step(win: _Window, w, r, Jc, Jp, lam):
    """Damped Gauss-Newton step via the Schur complement on the points."""
    P, F = win.n_points, win.n_free
    wJp_t = (w[:, None, None] * Jp).transpose(0, 2, 1)          # (N, 3, 2)
    Hpp = _scatter_sum(win.obs_point, wJp_t @ Jp, P)
    bp = -_scatter_sum(win.obs_point, (wJp_t @ r[:, :, None])[:, :, 0], P)

    diag_p = np.maximum(np.einsum("pii->pi", Hpp), 1e-12)
    Hpp_inv = np.linalg.inv(Hpp + lam * diag_p[:, :, None] * np.eye(3))

    if F == 0:
        return np.zeros((0, 6)), (Hpp_inv @ bp[:, :, None])[:, :, 0]

    free = win.free_index[win.obs_frame]
    m = free >= 0
    fi, pi = free[m], win.obs_point[m]
    wJc_t = (w[m, None, None] * Jc[m]).transpose(0, 2, 1)      # (M, 6, 2)
    Hcc = _scatter_sum(fi, wJc_t @ Jc[m], F)
    bc = -_scatter_sum(fi, (wJc_t @ r[m][:, :, None])[:, :, 0], F)
    Hcp = _scatter_sum(fi * P + pi, wJc_t @ Jp[m], F * P).reshape(F, P, 6, 3)

    diag_c = np.maximum(np.einsum("fii->fi", Hcc), 1e-12)
    Hcc_d = Hcc + lam * diag_c[:, :, None] * np.eye(6)
    T = Hcp @ Hpp_inv[None]                                      # (F, P, 6, 3)
    A = T.transpose(0, 2, 1, 3).reshape(6 * F, 3 * P)
    B = Hcp.transpose(0, 2, 1, 3).reshape(6 * F, 3 * P)
    S = -(A @ B.T)
    for f in range(F):
        S[6 * f:6 * f + 6, 6 * f:6 * f + 6] += Hcc_d[f]
    rhs = bc.reshape(6 * F) - A @ bp.reshape(3 * P)
    dc = np.linalg.solve(S, rhs).reshape(F, 6)
    back = (B.T @ dc.reshape(6 * F)).reshape(P, 3)
    dp = (Hpp_inv @ (bp - back)[:, :, None])[:, :, 0]
    return dc, dp


def optimize_window(problem: WindowProblem, mode: KernelMode, config: SolverConfig | None = None,
                    table: PartitionTable | None = None) -> Tuple[WindowSolution, SolveReport]:
    """Local bundle adjustment over free keyframe poses and all window points.

    In adaptive mode every outer iteration first re-estimates alpha from the
    current whitened residual magnitudes (state fixed), then runs up to
    ``max_inner_iterations`` LM steps with alpha fixed.
    """
    config = config or SolverConfig()
    config.validate()
    adaptive = isinstance(mode, BarronAdaptive)
    if adaptive:
        if table is None:
            table = kernel.get_partition_table(mode.grid)
        if table.grid != mode.grid:
            raise InvalidArgumentError("partition table grid differs from the kernel grid")

    win = _Window(problem)
    intr = problem.intrinsics
    Rs = np.array([p.rotation for _, p in problem.keyframes])
    ts = np.array([p.translation for _, p in problem.keyframes])
    X = np.array([p.position for p in problem.points]).reshape(-1, 3)
    free_rows = np.flatnonzero(~win.fixed)

    if isinstance(mode, BarronFixed):
        alpha = mode.alpha
    elif adaptive:
        alpha = float(config.alpha_init)
    else:
        alpha = float("nan")
    report = SolveReport()

    r, valid, Jc, Jp = _window_eval(win, Rs, ts, X, intr, True)
    active = valid.copy()
    e = np.linalg.norm(r, axis=1)

    def cost_of(mags, mask, a):
        return robust_cost(mags[mask], mode, a)

    def update_alpha(a_prev):
        mags = e[active]
        if mags.size == 0:
            return a_prev
        a_new = estimate_alpha(mags, table)
        report.nll_trace.append((nll(mags, a_prev, table), nll(mags, a_new, table)))
        return a_new

    cost = cost_of(e, active, alpha)
    lam = config.lm_initial_lambda
    report._record(0, cost, alpha, lam)
    total = 0
    failed = False

    settled = False   # previous outer iteration made no meaningful progress
    for outer in range(config.max_outer_iterations):
        if adaptive:
            alpha_prev = alpha
            alpha = update_alpha(alpha)
            report.alpha_trace.append(alpha)
            cost = cost_of(e, active, alpha)
            report._record(outer, cost, alpha, lam)
            if settled and alpha == alpha_prev:
                report.converged = True
                break
        start_cost = cost
        for inner in range(config.max_inner_iterations):
            if cost <= COST_FLOOR:
                break
            if adaptive and config.alpha_update == "inner" and inner > 0:
                alpha = update_alpha(alpha)
                report.alpha_trace.append(alpha)
                cost = cost_of(e, active, alpha)
            w = irls_weights(e, mode, alpha) * active
            accepted = False
            while lam <= MAX_LAMBDA:
                try:
                    dc, dp = _window_step(win, w, r, Jc, Jp, lam)
                except np.linalg.LinAlgError:
                    lam *= config.lm_lambda_factor
                    continue
                Rs_t, ts_t = Rs.copy(), ts.copy()
                for k, row in enumerate(free_rows):
                    upd = se3_exp(dc[k]) @ SE3Pose(Rs[row], ts[row])
                    Rs_t[row], ts_t[row] = upd.rotation, upd.translation
                X_t = X + dp
                r_t, valid_t, Jc_t, Jp_t = _window_eval(win, Rs_t, ts_t, X_t, intr, True)
                if np.any(active & ~valid_t):
                    lam *= config.lm_lambda_factor
                    continue
                e_t = np.linalg.norm(r_t, axis=1)
                cost_t = cost_of(e_t, active, alpha)
                if cost_t <= cost:
                    accepted = True
                    break
                lam *= config.lm_lambda_factor
            total += 1
            if not accepted:
                failed = True
                break
            decrease = cost - cost_t
            Rs, ts, X, r, Jc, Jp, e, cost = Rs_t, ts_t, X_t, r_t, Jc_t, Jp_t, e_t, cost_t
            lam = max(lam / config.lm_lambda_factor, MIN_LAMBDA)
            report._record(outer, cost, alpha, lam)
            step = math.sqrt(float(np.sum(dc ** 2) + np.sum(dp ** 2)))
            if step < STEP_TOL or decrease <= config.rel_cost_tolerance * max(cost + decrease, 1e-300):
                break
        if failed:
            break
        if config.remove_outliers:
            active &= ~classify_outliers(e, config.outlier_chi2_threshold)
        settled = (cost <= COST_FLOOR
                   or start_cost - cost <= config.rel_cost_tolerance * max(start_cost, 1e-300))
        if settled and not adaptive:
            report.converged = True
            break

    report.iterations_used = total
    report.final_cost = cost
    report.final_alpha = alpha
    flags = ~active | ~valid
    flags |= classify_outliers(e, config.outlier_chi2_threshold)
    report.outlier_flags = flags
    if failed:
        report.converged = False

    poses = {fid: SE3Pose(Rs[i], ts[i]) for i, fid in enumerate(win.frame_ids)}
    points = {pid: X[i].copy() for i, pid in enumerate(win.point_ids)}
    return WindowSolution(poses, points), report
