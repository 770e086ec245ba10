"""Metric depth recovery with a first-order rational warp.

Monocular values ``m`` are mapped to metric depth by

    f(m) = (a*m + b) / (c*m + d)

fitted per image to tie-point correspondences ``(m_i, g_i)`` where ``g_i`` is
the tie point's camera-frame depth. The four coefficients are only defined up
to a common scale; the canonical representative has unit Euclidean norm with
``d >= 0`` (``c >= 0`` when ``d == 0``).

The fit is a homogeneous linear least-squares initialization followed by
Levenberg-Marquardt on the (optionally Huber-weighted) metric residuals
``f(m_i) - g_i``, with an optional inlier-trimming pass.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateSystem, InsufficientPairs, KindMismatch
from .geometry import CameraIntrinsics, CameraPose, tie_point_depth
from .rasters import DepthMap, bilinear_lookup

logger = logging.getLogger(__name__)

HARD_MIN_PAIRS = 4
STATUS_OK = "ok"
STATUS_DEGRADED = "degraded"
STATUS_POLE = "rejected_pole"
STATUS_INSUFFICIENT = "rejected_insufficient"
# Huber tuning constant and MAD-to-sigma factor for Gaussian noise
HUBER_K = 1.345
MAD_SCALE = 1.4826


def normalize(theta) -> np.ndarray:
    """Canonical representative of a coefficient vector ``(a, b, c, d)``."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta[2] == 0 and theta[3] == 0:
        raise DegenerateSystem("denominator coefficients are both zero")
    theta = theta / np.linalg.norm(theta)
    if theta[3] < 0 or (theta[3] == 0 and theta[2] < 0):
        theta = -theta
    return theta


def denominator_eps(mono_range) -> float:
    return 1e-9 * max(1.0, abs(mono_range[0]), abs(mono_range[1]))


def inflate_range(mono_range, margin: float = 0.1) -> tuple[float, float]:
    """Widen each bound by ``margin`` times its own magnitude (sign preserving)."""
    lo, hi = mono_range
    return lo - margin * abs(lo), hi + margin * abs(hi)


@dataclass(frozen=True)
class RationalModel:
    a: float
    b: float
    c: float
    d: float
    mono_range: tuple[float, float] = (-np.inf, np.inf)

    @classmethod
    def from_params(cls, theta, mono_range=(-np.inf, np.inf)) -> "RationalModel":
        a, b, c, d = (float(x) for x in normalize(theta))
        return cls(a, b, c, d, (float(mono_range[0]), float(mono_range[1])))

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    @property
    def determinant(self) -> float:
        return self.a * self.d - self.b * self.c

    def denominator(self, m):
        return self.c * np.asarray(m, dtype=np.float64) + self.d

    def __call__(self, m):
        m = np.asarray(m, dtype=np.float64)
        return (self.a * m + self.b) / (self.c * m + self.d)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "d": self.d,
                "mono_range": list(self.mono_range)}


class CorrespondencePair(NamedTuple):
    z_mono: float
    z_gt: float
    u: float
    v: float


@dataclass(eq=False)
class Correspondences:
    """Tie-point samples for one image plus counts of dropped observations."""

    mono: np.ndarray
    depth: np.ndarray
    uv: np.ndarray
    dropped: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.mono)

    def pairs(self) -> list[CorrespondencePair]:
        return [CorrespondencePair(float(m), float(g), float(u), float(v))
                for m, g, (u, v) in zip(self.mono, self.depth, self.uv)]


def build_correspondences(
    image_id: int,
    pose: CameraPose,
    k: CameraIntrinsics,
    tie_points,
    mono: DepthMap,
    edge_k: float | None = None,
) -> Correspondences:
    """Pair each tie point observed in ``image_id`` with the monocular value at
    its pixel.

    ``mono`` must already be aligned to the camera's pixel frame. Observations
    are dropped when the point is behind the camera, the pixel is out of
    bounds, or the bilinear sample touches an invalid pixel.

    With ``edge_k`` set, samples whose 2x2 neighborhood spread exceeds
    ``edge_k`` times the median spread over the image's pairs are dropped as
    well: their value blends both sides of a depth discontinuity.
    """
    if (mono.width, mono.height) != (k.width, k.height):
        raise ValueError(
            f"mono map {mono.width}x{mono.height} is not aligned to {k.width}x{k.height}; resample first"
        )
    xyz, uv = tie_points.observations_for(image_id)
    z_gt = tie_point_depth(pose, xyz)
    behind = ~(z_gt > 0)
    outside = ~k.in_bounds(uv) & ~behind
    samples, ok = bilinear_lookup(mono.values, mono.valid, uv)
    invalid = ~ok & ~behind & ~outside
    keep = ~(behind | outside | invalid)
    edge = np.zeros_like(keep)
    if edge_k is not None and keep.any():
        idx = np.flatnonzero(keep)
        spread = neighborhood_spread(mono, uv[idx])
        typical = float(np.median(spread))
        if typical > 0:
            edge[idx[spread > edge_k * typical]] = True
        keep &= ~edge
    dropped = {
        "behind_camera": int(behind.sum()),
        "out_of_bounds": int(outside.sum()),
        "invalid_sample": int(invalid.sum()),
        "discontinuity": int(edge.sum()),
    }
    return Correspondences(samples[keep], z_gt[keep], uv[keep], dropped)


def neighborhood_spread(mono: DepthMap, uv) -> np.ndarray:
    """Max minus min of the four pixels around each in-bounds coordinate."""
    uv = np.asarray(uv, dtype=np.float64)
    w, h = mono.width, mono.height
    i0 = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, max(w - 2, 0))
    j0 = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, max(h - 2, 0))
    i1 = np.minimum(i0 + 1, w - 1)
    j1 = np.minimum(j0 + 1, h - 1)
    grid = np.where(mono.valid, mono.values, np.nan)
    vals = np.stack([grid[j, i] for j, i in ((j0, i0), (j0, i1), (j1, i0), (j1, i1))], axis=1)
    return np.nanmax(vals, axis=1) - np.nanmin(vals, axis=1)


def residuals(theta, m, g) -> np.ndarray:
    a, b, c, d = theta
    return (a * m + b) / (c * m + d) - g


def jacobian(theta, m) -> np.ndarray:
    """Analytic derivative of the residuals w.r.t. ``(a, b, c, d)``, shape ``(n, 4)``."""
    a, b, c, d = theta
    m = np.asarray(m, dtype=np.float64)
    num = a * m + b
    den = c * m + d
    return np.column_stack([m / den, 1.0 / den, -m * num / den**2, -num / den**2])


def _rmse(r) -> float:
    return float(np.sqrt(np.mean(np.square(r)))) if len(r) else 0.0


def _pole_free(theta, m) -> bool:
    den = theta[2] * m + theta[3]
    eps = 1e-12 * max(1.0, float(np.max(np.abs(m))))
    return bool(np.all(den > eps) or np.all(den < -eps))


def _standardize(m, g):
    """Shift/scale for both axes; the rational family is closed under affine
    maps of ``m`` and of ``f``, so fitting in standardized units loses nothing
    and keeps the normal equations well conditioned."""
    mu = float(np.mean(m))
    s = float(np.std(m)) or 1.0
    nu = float(np.mean(g))
    t = float(np.std(g)) or 1.0
    return mu, s, nu, t


def _destandardize(theta, mu, s, nu, t) -> np.ndarray:
    """Coefficients in original units from ones fitted to ``((m-mu)/s, (g-nu)/t)``."""
    a, b, c, d = theta
    A = nu * c + t * a
    B = nu * d + t * b
    return np.array([A / s, B - A * mu / s, c / s, d - c * mu / s])


def _null_vector(m, g) -> np.ndarray:
    A = np.column_stack([m, np.ones_like(m), -m * g, -g])
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    _, sv, vt = np.linalg.svd(A / scale, full_matrices=True)
    if len(sv) < 3 or sv[2] <= 1e-10 * sv[0]:
        raise DegenerateSystem(f"rank < 3 (singular values {sv})")
    theta = vt[-1] / scale
    if theta[2] == 0 and theta[3] == 0:
        raise DegenerateSystem("null direction has a vanishing denominator")
    return theta


def fit_linear_init(mono, depth) -> RationalModel:
    """Closed-form initializer from ``g*(c*m + d) = a*m + b``.

    Takes the right singular vector of the smallest singular value of the
    column-equilibrated system matrix, built from standardized values.

    Raises:
        DegenerateSystem: if the system has rank < 3 (e.g. all ``m`` equal).
    """
    m = np.asarray(mono, dtype=np.float64)
    g = np.asarray(depth, dtype=np.float64)
    if len(m) < 3:
        raise DegenerateSystem(f"need at least 3 pairs, got {len(m)}")
    if np.ptp(m) == 0:
        raise DegenerateSystem("all monocular values are identical")
    std = _standardize(m, g)
    theta = _destandardize(_null_vector((m - std[0]) / std[1], (g - std[2]) / std[3]), *std)
    if theta[2] == 0 and theta[3] == 0:
        raise DegenerateSystem("null direction has a vanishing denominator")
    return RationalModel.from_params(theta, (float(m.min()), float(m.max())))


def _loss_terms(r, loss, delta):
    """Objective value and IRLS weights."""
    if loss == "square":
        return 0.5 * float(np.dot(r, r)), np.ones_like(r)
    ar = np.abs(r)
    quad = ar <= delta
    obj = float(np.sum(np.where(quad, 0.5 * r * r, delta * (ar - 0.5 * delta))))
    w = np.where(quad, 1.0, delta / np.where(quad, 1.0, ar))
    return obj, w


def levenberg_marquardt(theta, m, g, loss="square", delta=1.0, max_iter=200, tol=1e-12):
    """Damped Gauss-Newton on the gauge-normalized coefficients.

    Steps are projected orthogonal to the current (unit) parameter vector,
    since scaling the coefficients leaves ``f`` unchanged, and are rejected if
    they move a pole onto any data point.

    Returns:
        ``(theta, iterations, converged)``
    """
    theta = normalize(theta)
    r = residuals(theta, m, g)
    obj, w = _loss_terms(r, loss, delta)
    lam = 1e-3
    for it in range(1, max_iter + 1):
        J = jacobian(theta, m)
        grad = J.T @ (w * r)
        H = J.T @ (J * w[:, None])
        diag = np.maximum(np.diag(H), 1e-12 * max(np.max(np.diag(H)), 1e-300))
        if obj == 0.0 or np.max(np.abs(grad)) <= 1e-15 * max(obj, 1e-300):
            return theta, it, True
        while True:
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                step -= np.dot(step, theta) * theta
                cand = normalize(theta + step)
                if _pole_free(cand, m):
                    r_new = residuals(cand, m, g)
                    obj_new, w_new = _loss_terms(r_new, loss, delta)
                    if obj_new < obj:
                        moved = np.linalg.norm(cand - theta)
                        improvement = obj - obj_new
                        theta, r, obj, w = cand, r_new, obj_new, w_new
                        lam = max(lam / 10.0, 1e-15)
                        if improvement <= tol * obj or moved <= tol:
                            return theta, it, True
                        break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left at this precision
                return theta, it, True
    return theta, max_iter, False


def _affine_start(m, g) -> np.ndarray:
    slope, intercept = np.polyfit(m, g, 1)
    return np.array([slope, intercept, 0.0, 1.0])


@dataclass
class FitOptions:
    loss: str = "huber"
    huber_delta: float | None = None
    delta_floor: float = 1e-6
    max_iter: int = 200
    tol: float = 1e-12
    min_pairs: int = 8
    outlier_k: float | None = 3.0
    outlier_floor: float = 1e-6
    trim_rounds: int = 2
    range_margin: float = 0.1
    edge_k: float | None = 20.0

    def __post_init__(self):
        if self.loss not in ("square", "huber"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.min_pairs < HARD_MIN_PAIRS:
            raise ValueError(f"min_pairs must be >= {HARD_MIN_PAIRS}")
        if self.max_iter < 1 or not self.tol > 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")
        if self.huber_delta is not None and not self.huber_delta > 0:
            raise ValueError("huber_delta must be > 0")
        if self.edge_k is not None and not self.edge_k > 1:
            raise ValueError("edge_k must be > 1 or null")


@dataclass
class FitReport:
    status: str
    residual_rmse: float = float("nan")
    n_pairs: int = 0
    n_inliers: int = 0
    iterations: int = 0
    init_rmse: float = float("nan")
    huber_delta: float | None = None
    message: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def validate_model(model: RationalModel, mono_range=None, increasing: bool | None = None,
                   margin: float = 0.1) -> str:
    """Check a model for poles and orientation over the inflated mono range.

    Returns ``rejected_pole`` if the denominator vanishes or changes sign over
    the range, ``degraded`` if the warp is constant or its orientation
    disagrees with ``increasing``, else ``ok``.
    """
    mono_range = model.mono_range if mono_range is None else mono_range
    lo, hi = inflate_range(mono_range, margin)
    eps = denominator_eps(mono_range)
    d_lo, d_hi = model.denominator(lo), model.denominator(hi)
    if not (np.isfinite(d_lo) and np.isfinite(d_hi)):
        return STATUS_POLE
    if d_lo * d_hi <= 0 or min(abs(d_lo), abs(d_hi)) < eps:
        return STATUS_POLE
    det = model.determinant
    if abs(det) <= 1e-15:
        return STATUS_DEGRADED
    if increasing is not None and (det > 0) != increasing:
        return STATUS_DEGRADED
    return STATUS_OK


def _orientation(m, g) -> bool | None:
    if np.ptp(m) == 0 or np.ptp(g) == 0:
        return None
    corr = np.corrcoef(m, g)[0, 1]
    if not np.isfinite(corr) or abs(corr) < 0.1:
        return None
    return bool(corr > 0)


def fit_rational(mono, depth, options: FitOptions | None = None):
    """Fit the rational warp to correspondences.

    Returns:
        ``(model, report)``. ``report.status`` is ``ok``, ``degraded``
        (iteration cap hit or orientation mismatch) or ``rejected_pole``.
        A free fit whose pole falls inside the inflated mono range is replaced
        by the affine least-squares warp when that one is pole free.

    Raises:
        InsufficientPairs: fewer than ``options.min_pairs`` pairs.
        DegenerateSystem: monocular values carry no information.
    """
    opts = options or FitOptions()
    m = np.asarray(mono, dtype=np.float64)
    g = np.asarray(depth, dtype=np.float64)
    n = len(m)
    if n < opts.min_pairs:
        raise InsufficientPairs(f"{n} pairs, need at least {opts.min_pairs}")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(g))):
        raise ValueError("pairs must be finite")

    if np.ptp(m) == 0:
        raise DegenerateSystem("all monocular values are identical")
    mu, sm, nu, t = std = _standardize(m, g)
    ms, gs = (m - mu) / sm, (g - nu) / t

    init = fit_linear_init(m, g)
    init_rmse = _rmse(residuals(init.params, m, g))
    start = normalize(_null_vector(ms, gs))
    if not _pole_free(start, ms):
        start = normalize(_affine_start(ms, gs))
        logger.debug("linear init has a pole inside the data; starting from affine fit")

    def delta_for(r):
        # r in original units; LM works in standardized units
        if opts.loss != "huber":
            return None
        if opts.huber_delta is not None:
            return opts.huber_delta
        return max(HUBER_K * MAD_SCALE * float(np.median(np.abs(r))), opts.delta_floor)

    def lm(theta, sel, delta):
        return levenberg_marquardt(theta, ms[sel], gs[sel], opts.loss, (delta or 1.0) / t,
                                   opts.max_iter, opts.tol)

    inliers = np.ones(n, dtype=bool)
    delta = delta_for(t * residuals(start, ms, gs))
    theta_s, iterations, converged = lm(start, inliers, delta)
    if opts.outlier_k is not None:
        for _ in range(opts.trim_rounds):
            r = t * residuals(theta_s, ms, gs)
            sigma = MAD_SCALE * float(np.median(np.abs(r[inliers])))
            keep = np.abs(r) <= max(opts.outlier_k * sigma, opts.outlier_floor)
            if keep.sum() < opts.min_pairs or np.array_equal(keep, inliers):
                break
            inliers = keep
            delta = delta_for(r[inliers])
            theta_s, it, converged = lm(theta_s, inliers, delta)
            iterations += it
    theta = _destandardize(theta_s, *std)

    mi, gi = m[inliers], g[inliers]
    model = RationalModel.from_params(theta, (float(mi.min()), float(mi.max())))
    increasing = _orientation(mi, gi)
    status = validate_model(model, increasing=increasing, margin=opts.range_margin)
    message = ""
    if status == STATUS_POLE:
        # a pole pulled into the extrapolation range by noise means the
        # curvature is not identifiable from these pairs; use the affine limit
        affine = RationalModel.from_params(_destandardize(_affine_start(ms[inliers], gs[inliers]), *std),
                                           model.mono_range)
        if validate_model(affine, increasing=increasing, margin=opts.range_margin) != STATUS_POLE:
            logger.debug("free fit has a pole in the extrapolation range; using the affine warp")
            model, message = affine, "pole in the extrapolation range; affine warp used"
            status = validate_model(model, increasing=increasing, margin=opts.range_margin)
    rmse = _rmse(residuals(model.params, mi, gi))
    if status == STATUS_OK and not converged:
        status = STATUS_DEGRADED
        message = f"no convergence within {opts.max_iter} iterations"
    elif status == STATUS_DEGRADED:
        message = "warp orientation disagrees with the data"
    elif status == STATUS_POLE:
        message = "denominator changes sign over the mono range"
    report = FitReport(
        status=status,
        residual_rmse=rmse,
        n_pairs=n,
        n_inliers=int(inliers.sum()),
        iterations=iterations,
        init_rmse=init_rmse,
        huber_delta=delta,
        message=message,
    )
    return model, report


def apply_model(model: RationalModel, mono: DepthMap, margin: float = 0.1) -> DepthMap:
    """Transform a relative/disparity map to metric depth.

    A pixel is invalidated when its value lies outside the inflated mono
    range, sits within ``denominator_eps`` of the pole, or maps to a
    non-positive or non-finite depth.
    """
    if mono.kind == "metric":
        raise KindMismatch("apply_model expects a relative or disparity map")
    if validate_model(model, margin=margin) == STATUS_POLE:
        raise ValueError("model has a pole inside its mono range")
    v = mono.filled(0.0)
    lo, hi = inflate_range(model.mono_range, margin)
    den = model.denominator(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (model.a * v + model.b) / den
    ok = (
        mono.valid
        & (v >= lo)
        & (v <= hi)
        & (np.abs(den) >= denominator_eps(model.mono_range))
        & np.isfinite(out)
        & (out > 0)
    )
    return DepthMap(np.where(ok, out, np.nan), ok, "metric")


def model_rmse(model: RationalModel, mono, depth) -> float:
    return _rmse(residuals(model.params, np.asarray(mono, float), np.asarray(depth, float)))
