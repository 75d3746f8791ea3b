import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from app.api.schemas import AngleReport, ConvergenceReport
from app.exceptions import DegenerateFitError, NoJunctionError
from app.services.model import PhaseState
from app.services.tension import SurfaceTensions
from app.utils.grid_field import NormKind, ScalarField, coarsen_compare, integrate, norm

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# three fitted interface directions all within this angle of each other do not pin a junction
PARALLEL_DEG = 5.0

Sign = Literal["above", "below"]
EdgeKey = tuple[str, int, int]


def estimate_order(err_coarse: float, err_fine: float) -> float:
    if err_coarse <= 0 or err_fine <= 0:
        raise ValueError(f"errors must be positive, got {err_coarse} and {err_fine}")
    return math.log2(err_coarse / err_fine)


def richardson_error(diff_norm: float, order: float) -> float:
    """Error of the coarser of two solutions, from their difference and the observed order."""
    return diff_norm / (1.0 - 2.0 ** (-order))


def convergence_report(
    levels: Sequence[float], solutions: Sequence[ScalarField], kind: NormKind = "l2"
) -> ConvergenceReport:
    """
    Differences between solutions on adjacent levels, coarse to fine. Solutions on
    nested grids are compared at the coarse nodes; on equal grids directly.
    """
    if len(levels) != len(solutions) or len(solutions) < 2:
        raise ValueError("need at least two levels with one solution each")
    errors = []
    for coarse, fine in zip(solutions, solutions[1:]):
        if coarse.grid == fine.grid:
            errors.append(norm(fine.with_values(fine.values - coarse.values), kind))
        else:
            errors.append(norm(coarsen_compare(fine, coarse), kind))
    orders = [estimate_order(a, b) for a, b in zip(errors, errors[1:])] if len(solutions) >= 3 else []
    richardson = [richardson_error(e, p) for e, p in zip(errors, orders)]
    return ConvergenceReport(levels=list(levels), errors=errors, orders=orders, richardson=richardson)


@dataclass
class Contours:
    """Interface polylines: gamma1 = {phi=0, psi>0}, gamma2 = {psi=0, phi>0}, gamma3 = {psi=0, phi<0}."""

    gamma1: list[np.ndarray] = field(default_factory=list)
    gamma2: list[np.ndarray] = field(default_factory=list)
    gamma3: list[np.ndarray] = field(default_factory=list)

    def sets(self) -> list[list[np.ndarray]]:
        return [self.gamma1, self.gamma2, self.gamma3]

    @staticmethod
    def points_of(polylines: list[np.ndarray]) -> np.ndarray:
        if not polylines:
            return np.zeros((0, 2))
        return np.concatenate(polylines, axis=0)

    def points(self) -> list[np.ndarray]:
        return [self.points_of(s) for s in self.sets()]


def _edge_points(u: ScalarField) -> tuple[np.ndarray, np.ndarray]:
    """Linear-interpolation parameter of the zero crossing on every x-edge and y-edge."""
    v = u.values
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = v[:-1, :] / (v[:-1, :] - v[1:, :])
        ty = v[:, :-1] / (v[:, :-1] - v[:, 1:])
    return tx, ty


def _marching_squares(u: ScalarField) -> tuple[list[tuple[EdgeKey, EdgeKey]], dict[EdgeKey, np.ndarray]]:
    grid = u.grid
    v = u.values
    positive = v > 0
    cross_x = positive[1:, :] != positive[:-1, :]
    cross_y = positive[:, 1:] != positive[:, :-1]
    tx, ty = _edge_points(u)

    points: dict[EdgeKey, np.ndarray] = {}
    for i, j in zip(*np.nonzero(cross_x)):
        points[("x", i, j)] = np.array([(i + tx[i, j]) * grid.hx, j * grid.hy])
    for i, j in zip(*np.nonzero(cross_y)):
        points[("y", i, j)] = np.array([i * grid.hx, (j + ty[i, j]) * grid.hy])

    cells = cross_x[:, :-1] | cross_x[:, 1:] | cross_y[:-1, :] | cross_y[1:, :]
    segments = []
    for i, j in zip(*np.nonzero(cells)):
        bottom, top, left, right = ("x", i, j), ("x", i, j + 1), ("y", i, j), ("y", i + 1, j)
        hits = [e for e in (bottom, right, top, left) if e in points]
        if len(hits) == 2:
            segments.append((hits[0], hits[1]))
        elif len(hits) == 4:
            centre = 0.25 * (v[i, j] + v[i + 1, j] + v[i, j + 1] + v[i + 1, j + 1])
            if (centre > 0) == positive[i, j]:
                segments += [(bottom, right), (top, left)]
            else:
                segments += [(bottom, left), (top, right)]
    return segments, points


def _chain(segments: list[tuple[EdgeKey, EdgeKey]], points: dict[EdgeKey, np.ndarray]) -> list[np.ndarray]:
    adjacency: dict[EdgeKey, list[int]] = defaultdict(list)
    for idx, (a, b) in enumerate(segments):
        adjacency[a].append(idx)
        adjacency[b].append(idx)
    used = [False] * len(segments)

    def extend(end: EdgeKey) -> list[EdgeKey]:
        path = []
        while True:
            nxt = next((s for s in adjacency[end] if not used[s]), None)
            if nxt is None:
                return path
            used[nxt] = True
            a, b = segments[nxt]
            end = b if a == end else a
            path.append(end)

    polylines = []
    for start, (a, b) in enumerate(segments):
        if used[start]:
            continue
        used[start] = True
        forward = extend(b)
        backward = extend(a)
        keys = list(reversed(backward)) + [a, b] + forward
        polylines.append(np.array([points[k] for k in keys]))
    return polylines


def _sample(u: ScalarField, xy: np.ndarray) -> np.ndarray:
    coords = np.vstack([xy[:, 0] / u.grid.hx, xy[:, 1] / u.grid.hy])
    return ndimage.map_coordinates(u.values, coords, order=1, mode="nearest")


def zero_contour(u: ScalarField, mask: ScalarField | None = None, mask_sign: Sign = "above") -> list[np.ndarray]:
    """
    Polylines of {u = 0} by marching squares; with a mask, only segments whose
    midpoint has mask > 0 ("above") or mask < 0 ("below") are kept.
    """
    segments, points = _marching_squares(u)
    if mask is not None and segments:
        mids = np.array([0.5 * (points[a] + points[b]) for a, b in segments])
        values = _sample(mask, mids)
        keep = values > 0 if mask_sign == "above" else values < 0
        segments = [s for s, k in zip(segments, keep) if k]
    return _chain(segments, points)


def extract_contours(state: PhaseState, p=None) -> Contours:
    if state.n_phases != 3:
        raise ValueError("interface extraction is defined for three phases")
    psi, phi = state.psi, state.phi
    return Contours(
        gamma1=zero_contour(phi, psi, "above"),
        gamma2=zero_contour(psi, phi, "above"),
        gamma3=zero_contour(psi, phi, "below"),
    )


def _fit_line(points: np.ndarray, anchor: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Orthogonal-regression line through the points: centroid, unit direction away from anchor, RMS residual."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    direction = vt[0]
    if np.dot(direction, centroid - anchor) < 0:
        direction = -direction
    normal = np.array([-direction[1], direction[0]])
    residual = float(np.sqrt(np.mean(((points - centroid) @ normal) ** 2)))
    return centroid, direction, residual


def _fit_circle(points: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Algebraic least-squares circle: centre, radius, RMS distance of the points from it."""
    origin = points.mean(axis=0)
    scale = float(np.max(np.linalg.norm(points - origin, axis=1))) or 1.0
    local = (points - origin) / scale
    design = np.column_stack([local, np.ones(len(local))])
    (d, e, f), *_ = np.linalg.lstsq(design, -np.sum(local**2, axis=1), rcond=None)
    centre = -0.5 * np.array([d, e])
    radius = math.sqrt(max(float(centre @ centre - f), 0.0))
    residual = float(np.sqrt(np.mean((np.linalg.norm(local - centre, axis=1) - radius) ** 2)))
    return origin + scale * centre, scale * radius, scale * residual


def _fit_tangent(points: np.ndarray, anchor: np.ndarray) -> tuple[np.ndarray, float]:
    """
    Unit tangent of an interface branch where it meets the anchor, pointing away from it,
    and the RMS residual of the fit. Curved branches are fitted by a circle and take its
    tangent at the point nearest the anchor; straight ones keep the regression line.
    """
    centroid, direction, line_residual = _fit_line(points, anchor)
    extent = float(np.max(np.linalg.norm(points - centroid, axis=1)))
    if line_residual <= 1e-9 * extent:
        return direction, line_residual
    centre, radius, circle_residual = _fit_circle(points)
    if not (radius > 0 and circle_residual < 0.5 * line_residual):
        return direction, line_residual
    radial = anchor - centre
    tangent = np.array([-radial[1], radial[0]]) / np.linalg.norm(radial)
    if np.dot(tangent, centroid - anchor) < 0:
        tangent = -tangent
    return tangent, circle_residual


def _nearly_parallel(directions: list[np.ndarray]) -> bool:
    limit = math.sin(math.radians(PARALLEL_DEG))
    return all(
        abs(a[0] * b[1] - a[1] * b[0]) < limit for i, a in enumerate(directions) for b in directions[i + 1 :]
    )


def _annulus(points: np.ndarray, centre: np.ndarray, r_in: float, r_out: float) -> np.ndarray:
    distance = np.linalg.norm(points - centre, axis=1)
    return points[(distance >= r_in) & (distance <= r_out)]


def _meeting_point(sets: list[np.ndarray]) -> tuple[np.ndarray, float]:
    """Centroid of the closest triple of points, one per interface, and its spread."""
    trees = [cKDTree(s) for s in sets]
    candidates = np.concatenate(sets, axis=0)
    distances = np.stack([tree.query(candidates)[0] for tree in trees], axis=1)
    best = int(np.argmin(distances.max(axis=1)))
    nearest = [s[tree.query(candidates[best])[1]] for s, tree in zip(sets, trees)]
    return np.mean(nearest, axis=0), float(distances[best].max())


def locate_junction(contours: Contours, r_in: float = 0.0, r_out: float = 0.1) -> tuple[float, float]:
    """
    Triple junction as the least-squares intersection of the three interface lines fitted
    in the annulus [r_in, r_out] around the point where the interfaces meet. Raises
    DegenerateFitError when all three fitted directions are nearly parallel and falls
    back to the meeting point when too few points are available.
    """
    sets = contours.points()
    if any(len(s) == 0 for s in sets):
        raise NoJunctionError("an interface is missing, no triple junction")
    guess, spread = _meeting_point(sets)
    if spread > r_out:
        raise DegenerateFitError(f"interfaces stay {spread:.3g} apart, they do not meet")

    centre = guess
    for _ in range(2):
        normal_matrix = np.zeros((2, 2))
        rhs = np.zeros(2)
        directions = []
        for s in sets:
            near = _annulus(s, centre, r_in, r_out)
            if len(near) < 2:
                logger.warning("Too few contour points near the junction, using the meeting point")
                return float(guess[0]), float(guess[1])
            point, direction, _ = _fit_line(near, centre)
            directions.append(direction)
            projector = np.eye(2) - np.outer(direction, direction)
            normal_matrix += projector
            rhs += projector @ point
        if _nearly_parallel(directions):
            raise DegenerateFitError(f"interface fits are parallel to within {PARALLEL_DEG:g} degrees")
        if np.linalg.cond(normal_matrix) > 1e8:
            logger.warning("Interface fits are parallel, using the meeting point")
            return float(guess[0]), float(guess[1])
        candidate = np.linalg.solve(normal_matrix, rhs)
        if np.linalg.norm(candidate - guess) > r_out:
            return float(guess[0]), float(guess[1])
        centre = candidate
    return float(centre[0]), float(centre[1])


def _opening(a_from: float, a_to: float, a_other: float) -> float:
    """Angle between two rays measured through the sector that does not hold the third ray."""
    sweep = (a_to - a_from) % 360.0
    inside = (a_other - a_from) % 360.0 < sweep
    return 360.0 - sweep if inside else sweep


def measure_angles(
    contours: Contours, junction: tuple[float, float], r_in: float, r_out: float
) -> AngleReport:
    """
    Apparent contact angles from the interface tangents at the junction, each fitted to
    the branch inside the annulus [r_in, r_out]: a circle for curved branches such as
    lens arcs, a line for straight ones.

    theta23 opens into phase 1 (between gamma2 and gamma3), theta12 into phase 3
    (between gamma1 and gamma2) and theta13 into phase 2 (between gamma1 and gamma3).
    """
    if not r_out > r_in > 0:
        raise ValueError(f"need r_out > r_in > 0, got r_in={r_in}, r_out={r_out}")
    centre = np.asarray(junction, dtype=np.float64)
    angles, residuals = [], []
    for k, s in enumerate(contours.points(), start=1):
        near = _annulus(s, centre, r_in, r_out)
        if len(near) < 4:
            raise DegenerateFitError(f"gamma{k} has {len(near)} points in the annulus, need at least 4")
        direction, residual = _fit_tangent(near, centre)
        angles.append(math.degrees(math.atan2(direction[1], direction[0])))
        residuals.append(residual)
    a1, a2, a3 = angles
    return AngleReport(
        theta23=_opening(a2, a3, a1),
        theta12=_opening(a1, a2, a3),
        theta13=_opening(a1, a3, a2),
        junction=(float(centre[0]), float(centre[1])),
        fit_residuals=residuals,
    )


def theoretical_angles(s: SurfaceTensions) -> tuple[float, float, float]:
    """
    Equilibrium angles (theta23, theta12, theta13) in degrees from the closed force triangle
    with sides (sigma23, sigma12, sigma13): each is 180 minus the interior angle opposite
    its tension.
    """
    s23, s12, s13 = s.triple
    if not (s23 < s12 + s13 and s12 < s23 + s13 and s13 < s23 + s12):
        raise NoJunctionError(f"tensions {s.triple} violate the triangle inequality: total spreading, no junction")
    theta23 = 180.0 - math.degrees(math.acos((s12**2 + s13**2 - s23**2) / (2.0 * s12 * s13)))
    theta12 = 180.0 - math.degrees(math.acos((s23**2 + s13**2 - s12**2) / (2.0 * s23 * s13)))
    return theta23, theta12, 360.0 - theta23 - theta12


def _mask(u: ScalarField, threshold: float, sign: Sign) -> np.ndarray:
    if sign == "above":
        return u.values > threshold
    if sign == "below":
        return u.values < threshold
    raise ValueError(f"unknown sign '{sign}'")


def count_components(u: ScalarField, threshold: float = 0.0, sign: Sign = "above") -> int:
    """4-connected components of the thresholded region."""
    _, count = ndimage.label(_mask(u, threshold, sign))
    return int(count)


def count_holes(u: ScalarField, threshold: float = 0.0, sign: Sign = "above") -> int:
    """Complement components (8-connected) that do not touch the domain boundary."""
    labels, count = ndimage.label(~_mask(u, threshold, sign), structure=np.ones((3, 3), dtype=int))
    border = set(np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])))
    return sum(1 for k in range(1, count + 1) if k not in border)


def spans_domain(u: ScalarField, threshold: float = 0.0, sign: Sign = "above", axis: int = 0) -> bool:
    """Whether one component of the thresholded region touches both ends of the domain along `axis`."""
    labels, _ = ndimage.label(_mask(u, threshold, sign))
    first = set(np.unique(np.take(labels, 0, axis=axis))) - {0}
    last = set(np.unique(np.take(labels, -1, axis=axis))) - {0}
    return bool(first & last)


def euler_characteristic(u: ScalarField, threshold: float = 0.0, sign: Sign = "above") -> int:
    return count_components(u, threshold, sign) - count_holes(u, threshold, sign)


def region_centroid(u: ScalarField, threshold: float = 0.0, sign: Sign = "above") -> tuple[float, float]:
    mask = _mask(u, threshold, sign)
    weights = u.grid.weights * mask
    total = weights.sum()
    if total == 0:
        raise ValueError("empty region has no centroid")
    xx, yy = u.grid.coordinates()
    return float((weights * xx).sum() / total), float((weights * yy).sum() / total)


def component_centroids(u: ScalarField, threshold: float = 0.0, sign: Sign = "above") -> list[tuple[float, float]]:
    labels, count = ndimage.label(_mask(u, threshold, sign))
    if count == 0:
        return []
    centres = ndimage.center_of_mass(u.grid.weights, labels, list(range(1, count + 1)))
    return [(float(i * u.grid.hx), float(j * u.grid.hy)) for i, j in centres]


def centroid_distance(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def set_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest distance between two point sets; infinite if either is empty."""
    if len(a) == 0 or len(b) == 0:
        return math.inf
    distances, _ = cKDTree(b).query(a)
    return float(np.min(distances))


def isoperimetric_ratio(u: ScalarField, level: float = 0.0) -> float:
    """4 pi area / perimeter^2 of {u < level} for a +-1 phase field; 1 for a disc."""
    shifted = u.with_values(u.values - level)
    area = integrate(shifted.with_values(np.clip((1.0 - shifted.values) / 2.0, 0.0, 1.0)))
    perimeter = sum(float(np.sum(np.linalg.norm(np.diff(line, axis=0), axis=1))) for line in zero_contour(shifted))
    if perimeter == 0:
        raise ValueError("field has no interface")
    return 4.0 * math.pi * area / perimeter**2
