"""
Analysis-by-synthesis recovery of expression and camera from rendered images.

The residual is the mean squared pixel difference between a render of
(identity, expression, camera) and the target. Renders are hard-edged, so
the residual is piecewise constant in the parameters; the search combines:

  1. correspondence least squares (face maps only): target colors decode
     triangle ids, so projected triangles are pulled onto their pixels,
     first by centroid, then by pixel-inside-triangle distances;
  2. compass search in the pixel domain from three starts;
  3. Nelder-Mead joint refinement.

A stage's result is kept only if it lowers the pixel residual, so the
reported history is non-increasing.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from .morphable import CameraParams, FaceShape, MorphableModel
from .rasterizer import BACKGROUND, project, rasterize_triangles, shade
from .errors import ShapeError


# Seeds of the jittered compass-search starts (the first start is the init itself)
MULTI_START_SEEDS = (0, 1)
CONVERGED_RESIDUAL = 1e-6

# Initial compass steps: expression, rotation (rad), translation, log-scale
_STEP_EXPR = 0.1
_STEP_ROT = 0.01
_STEP_TRANS = 0.01
_STEP_SCALE = 0.01
_MIN_STEP_RATIO = 1e-4


@dataclass
class FitResult:
    expression: np.ndarray
    camera: CameraParams
    residual: float
    converged: bool
    history: list[float] = field(default_factory=list)
    evaluations: int = 0

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.expression, self.camera.to_vector()])


class _Problem:
    """Render-and-compare objective over the packed vector [p_exp, camera]."""

    def __init__(
        self,
        target: np.ndarray,
        model: MorphableModel,
        colors: np.ndarray,
        background,
        identity: np.ndarray,
    ):
        if target.ndim != 3 or target.shape[2] != colors.shape[1]:
            raise ShapeError(f"Target must be (H, W, {colors.shape[1]}), got {target.shape}")
        self.target = target.astype(np.float32)
        self.H, self.W = target.shape[:2]
        self.model = model
        self.colors = colors
        self.background = background
        self.base = model.mean_shape + model.identity_basis @ identity
        self.n_exp = model.n_exp
        self.evaluations = 0

    def shape(self, vec: np.ndarray) -> FaceShape:
        return FaceShape(self.base + self.model.expression_basis @ vec[:self.n_exp])

    def camera(self, vec: np.ndarray) -> CameraParams:
        return CameraParams.from_vector(vec[self.n_exp:])

    def projection(self, vec: np.ndarray):
        return project(self.shape(vec), self.camera(vec), self.H, self.W)

    def render(self, vec: np.ndarray) -> np.ndarray:
        proj = self.projection(vec)
        mask = rasterize_triangles(proj.xy, proj.depth, self.model.triangles, self.H, self.W)
        return shade(mask, self.colors, self.background)

    def residual(self, vec: np.ndarray) -> float:
        self.evaluations += 1
        if not np.all(np.isfinite(vec)) or abs(vec[-1]) > 5:
            return float("inf")
        diff = self.render(vec) - self.target
        return float(np.mean(diff.astype(np.float64) ** 2))


# -----------------------------------------------------------------------------
# Correspondence stage
# -----------------------------------------------------------------------------

def decode_triangles(target: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """
    Map every pixel to the triangle whose color it carries exactly.

    Returns:
        (H, W) int array, BACKGROUND for pixels matching no triangle.
    """
    H, W, C = target.shape
    pixels = np.ascontiguousarray(target.reshape(-1, C), dtype=np.float32)
    lookup = {np.ascontiguousarray(c, dtype=np.float32).tobytes(): i for i, c in enumerate(colors)}
    unique, inverse = np.unique(pixels, axis=0, return_inverse=True)
    ids = np.array([lookup.get(u.tobytes(), BACKGROUND) for u in unique], dtype=np.int64)
    return ids[inverse.reshape(-1)].reshape(H, W)


class _Correspondence:
    """Pixel/triangle correspondences decoded from a face map."""

    def __init__(self, problem: _Problem, ids: np.ndarray):
        self.problem = problem
        rows, cols = np.nonzero(ids != BACKGROUND)
        self.pixel_tri = ids[rows, cols]
        self.pixels = np.stack([cols, rows], axis=1).astype(np.float64)

        tris, inverse, counts = np.unique(self.pixel_tri, return_inverse=True, return_counts=True)
        self.tris = tris
        sums = np.zeros((len(tris), 2))
        np.add.at(sums, inverse.reshape(-1), self.pixels)
        self.centroids = sums / counts[:, None]
        self.weights = np.sqrt(counts.astype(np.float64))

    def centroid_residuals(self, vec: np.ndarray) -> np.ndarray:
        xy = self.problem.projection(vec).xy
        centers = xy[self.problem.model.triangles[self.tris]].mean(axis=1)
        return ((centers - self.centroids) * self.weights[:, None]).reshape(-1)

    def inside_residuals(self, vec: np.ndarray) -> np.ndarray:
        """Signed distance (px) by which each pixel center lies outside its triangle, 0 if inside."""
        xy = self.problem.projection(vec).xy
        tri = xy[self.problem.model.triangles[self.pixel_tri]]   # (P, 3, 2)
        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        sign = np.where(area < 0, -1.0, 1.0)
        out = []
        for u, v in ((a, b), (b, c), (c, a)):
            edge = v - u
            length = np.maximum(np.hypot(edge[:, 0], edge[:, 1]), 1e-9)
            e = (edge[:, 0] * (self.pixels[:, 1] - u[:, 1]) - edge[:, 1] * (self.pixels[:, 0] - u[:, 0])) * sign
            out.append(np.minimum(e / length, 0.0))
        return np.concatenate(out)


def _least_squares(fun, x0: np.ndarray) -> np.ndarray:
    try:
        result = least_squares(fun, x0, method="trf", x_scale="jac", max_nfev=200)
    except (ValueError, np.linalg.LinAlgError):
        return x0
    return result.x


# -----------------------------------------------------------------------------
# Pixel-domain stages
# -----------------------------------------------------------------------------

def _initial_steps(n_exp: int) -> np.ndarray:
    return np.concatenate([
        np.full(n_exp, _STEP_EXPR),
        np.full(3, _STEP_ROT),
        np.full(2, _STEP_TRANS),
        [_STEP_SCALE],
    ])


def compass_search(
    fun,
    x0: np.ndarray,
    steps: np.ndarray,
    f0: float | None = None,
    max_evals: int = 3000,
) -> tuple[np.ndarray, float, list[float]]:
    """
    Coordinate-wise pattern search: try +-step on each coordinate, keep any
    improvement, halve all steps after a sweep without one.

    Returns:
        (best x, best value, best value after every sweep)
    """
    x = x0.copy()
    fx = fun(x) if f0 is None else f0
    steps = steps.copy()
    floor = steps * _MIN_STEP_RATIO
    history = [fx]
    evals = 0
    while evals < max_evals and fx > 0 and np.any(steps > floor):
        improved = False
        for i in range(len(x)):
            if steps[i] <= floor[i]:
                continue
            for direction in (1.0, -1.0):
                trial = x.copy()
                trial[i] += direction * steps[i]
                ft = fun(trial)
                evals += 1
                if ft < fx:
                    x, fx = trial, ft
                    improved = True
                    break
        if not improved:
            steps /= 2.0
        history.append(fx)
    return x, fx, history


def fit_render(
    target: np.ndarray,
    model: MorphableModel,
    colors: np.ndarray,
    background,
    identity: np.ndarray,
    init: tuple[np.ndarray, CameraParams],
    correspondence: bool = False,
    max_evals: int = 3000,
) -> FitResult:
    """
    Recover (expression, camera) so that the render matches `target`.

    Args:
        target: (H, W, C) image.
        model: Morphable model.
        colors: (F, C) per-triangle colors used to render.
        background: Background color.
        identity: Known identity coefficients (held fixed).
        init: (expression, camera) starting guess.
        correspondence: Run the correspondence stage (colors must decode triangles).
        max_evals: Budget per compass start and for Nelder-Mead.

    Returns:
        FitResult. Non-convergence is reported via `converged`, never raised.
    """
    problem = _Problem(target, model, colors, background, np.asarray(identity, dtype=np.float64))
    expr0, cam0 = init
    x = np.concatenate([np.asarray(expr0, dtype=np.float64), cam0.to_vector()])
    if x.shape[0] != model.n_exp + 6:
        raise ShapeError(f"Initial expression has {len(expr0)} values, model expects {model.n_exp}")

    fx = problem.residual(x)
    history = [fx]

    def result(converged: bool) -> FitResult:
        return FitResult(
            expression=x[:model.n_exp].copy(),
            camera=problem.camera(x),
            residual=fx,
            converged=converged,
            history=history,
            evaluations=problem.evaluations,
        )

    if fx == 0.0:
        return result(True)

    if correspondence:
        ids = decode_triangles(problem.target, colors)
        if not np.any(ids != BACKGROUND):
            return result(False)
        corr = _Correspondence(problem, ids)
        for fun in (corr.centroid_residuals, corr.inside_residuals):
            candidate = _least_squares(fun, x)
            fc = problem.residual(candidate)
            if fc < fx:
                x, fx = candidate, fc
            history.append(fx)
            if fx == 0.0:
                return result(True)
    elif not np.any(np.abs(problem.target - np.asarray(background, dtype=np.float32)).sum(axis=-1) > 0):
        return result(False)

    # Multi-start compass search
    steps = _initial_steps(model.n_exp)
    starts = [x]
    for seed in MULTI_START_SEEDS:
        rng = np.random.default_rng(seed)
        starts.append(x + rng.uniform(-0.5, 0.5, size=x.shape) * steps)
    best_x, best_f = x, fx
    for start in starts:
        cx, cf, _ = compass_search(problem.residual, start, steps, max_evals=max_evals)
        if cf < best_f:
            best_x, best_f = cx, cf
    x, fx = best_x, best_f
    history.append(fx)

    # Joint refinement
    if fx > 0.0:
        simplex = np.vstack([x] + [x + np.eye(len(x))[i] * steps[i] * 0.1 for i in range(len(x))])
        nm = minimize(
            problem.residual, x, method="Nelder-Mead",
            options={"initial_simplex": simplex, "maxfev": max_evals, "xatol": 1e-6, "fatol": 0.0},
        )
        if nm.fun < fx:
            x, fx = nm.x, float(nm.fun)
        history.append(fx)

    return result(fx <= CONVERGED_RESIDUAL)


def fit_facemap(
    target: np.ndarray,
    model: MorphableModel,
    identity: np.ndarray,
    init: tuple[np.ndarray, CameraParams],
    max_evals: int = 3000,
) -> FitResult:
    """
    Recover expression and camera from a semantic face map with the
    identity fixed to the known source identity.
    """
    return fit_render(
        target, model, model.semantic_colors, 0.0, identity, init,
        correspondence=True, max_evals=max_evals,
    )


def fit_frame(
    frame: np.ndarray,
    model: MorphableModel,
    identity: np.ndarray,
    palette: np.ndarray,
    background: np.ndarray,
    init: tuple[np.ndarray, CameraParams],
    max_evals: int = 1500,
) -> FitResult:
    """Recover expression and camera from an RGB frame rendered (or generated) with a known palette."""
    return fit_render(frame, model, palette, background, identity, init, max_evals=max_evals)