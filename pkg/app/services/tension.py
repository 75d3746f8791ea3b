"""
Surface-tension interpolation functions of the dichotomy-based N-phase model.

Phase k of N occupies the region where phi_1 = ... = phi_{k-1} = 1 and phi_k = -1
(phase N: all fields equal 1). gamma_i weighs the Ginzburg-Landau energy of field
phi_i and is built recursively from its restrictions to the faces of the cube
[-1, 1]^(N-1) on which one phase is absent.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations, product
from typing import Callable, Sequence

import numpy as np

from app.api.schemas import ConsistencyReport
from app.exceptions import ConfigError

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

KAPPA = 3.0 / (2.0 * np.sqrt(2.0))
CLAMP = 1.1
DEFAULT_ALPHA = 3.01
MAX_ESCALATIONS = 8
CURVATURE_TOL = 1e-6
FD_STEP = 1e-4

Blend = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class SurfaceTensions:
    """
    Pairwise surface tensions sigma_ik, 1 <= i < k <= N, stored row-major:
    (sigma_12, sigma_13, ..., sigma_1N, sigma_23, ...).
    """

    n_phases: int
    upper: tuple[float, ...]

    def __post_init__(self):
        if self.n_phases < 2:
            raise ValueError(f"need at least 2 phases, got {self.n_phases}")
        expected = self.n_phases * (self.n_phases - 1) // 2
        values = tuple(float(v) for v in self.upper)
        if len(values) != expected:
            raise ValueError(f"{self.n_phases} phases need {expected} surface tensions, got {len(values)}")
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise ValueError(f"surface tensions must be positive and finite, got {values}")
        object.__setattr__(self, "upper", values)

    @classmethod
    def ternary(cls, s23: float, s12: float, s13: float) -> "SurfaceTensions":
        """Three-phase tensions in the (sigma_23, sigma_12, sigma_13) order used for experiment tuples."""
        return cls(3, (s12, s13, s23))

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(combinations(range(1, self.n_phases + 1), 2))

    def sigma(self, i: int, k: int) -> float:
        if i == k:
            raise ValueError(f"sigma({i},{i}) is undefined")
        i, k = min(i, k), max(i, k)
        if i < 1 or k > self.n_phases:
            raise IndexError(f"phase pair ({i},{k}) out of range for {self.n_phases} phases")
        return self.upper[self.pairs.index((i, k))]

    @property
    def triple(self) -> tuple[float, float, float]:
        if self.n_phases != 3:
            raise ValueError("triple is only defined for three phases")
        return (self.sigma(2, 3), self.sigma(1, 2), self.sigma(1, 3))

    def without_phase(self, phase: int) -> "SurfaceTensions":
        """Tensions of the (N-1)-phase system left when `phase` is absent, renumbered in order."""
        kept = [q for q in range(1, self.n_phases + 1) if q != phase]
        return SurfaceTensions(self.n_phases - 1, tuple(self.sigma(a, b) for a, b in combinations(kept, 2)))


def _blend(z):
    return (1.0 + z) ** 2 * (2.0 - z) / 4.0, 0.75 * (1.0 - z * z), -1.5 * z


def _blend_flip(z):
    return (1.0 - z) ** 2 * (2.0 + z) / 4.0, -0.75 * (1.0 - z * z), 1.5 * z


def _bump(z):
    s = 1.0 - z * z
    return s * s, -4.0 * z * s, 12.0 * z * z - 4.0


def _product(items):
    result = 1.0
    for item in items:
        result = result * item
    return result


def _sample_grid(axis: np.ndarray, count: int) -> np.ndarray:
    if count == 0:
        return np.zeros((1, 0))
    return np.array(list(product(axis, repeat=count)))


@dataclass
class TensionJet:
    """Value, gradient and Hessian diagonal of one gamma_i, per phase field."""

    value: np.ndarray
    gradient: list[np.ndarray]
    curvature: list[np.ndarray]


@dataclass(frozen=True)
class _Projector:
    coord: int
    branches: tuple[tuple[Blend, "TensionFunction"], ...]


class TensionFunction:
    def __init__(self, tensions: SurfaceTensions, index: int, lam: float, projectors: tuple[_Projector, ...]):
        self.tensions = tensions
        self.index = index
        self.lam = lam
        self.projectors = projectors
        self.n_fields = tensions.n_phases - 1

    def raw_jet(self, z: Sequence) -> TensionJet:
        """Unclamped evaluation by the Boolean sum of the face projectors."""
        d = self.n_fields
        if d == 1:
            return TensionJet(np.float64(KAPPA * self.tensions.sigma(1, 2)), [0.0], [0.0])

        value = 0.0
        grad: list = [0.0] * d
        curv: list = [0.0] * d
        for size in range(1, len(self.projectors) + 1):
            sign = 1.0 if size % 2 else -1.0
            for subset in combinations(self.projectors, size):
                *pinned, top = subset
                pinned_coords = {p.coord for p in pinned}
                pinned_blends = [(p.coord, _blend(z[p.coord])) for p in pinned]
                reduced_coords = [c for c in range(d) if c != top.coord]
                reduced = [1.0 if c in pinned_coords else z[c] for c in reduced_coords]
                for blend, face in top.branches:
                    h = face.raw_jet(reduced)
                    factors = pinned_blends + [(top.coord, blend(z[top.coord]))]
                    weight = _product(b[0] for _, b in factors)
                    value = value + sign * weight * h.value
                    for pos, (coord, (_, b1, b2)) in enumerate(factors):
                        rest = _product(b[0] for k, (_, b) in enumerate(factors) if k != pos)
                        grad[coord] = grad[coord] + sign * rest * b1 * h.value
                        curv[coord] = curv[coord] + sign * rest * b2 * h.value
                    for r, coord in enumerate(reduced_coords):
                        if coord not in pinned_coords:
                            grad[coord] = grad[coord] + sign * weight * h.gradient[r]
                            curv[coord] = curv[coord] + sign * weight * h.curvature[r]

        if self.lam:
            bumps = {c: _bump(z[c]) for c in range(d) if c != self.index - 1}
            value = value + self.lam * _product(q[0] for q in bumps.values())
            for c, (_, q1, q2) in bumps.items():
                rest = _product(q[0] for k, q in bumps.items() if k != c)
                grad[c] = grad[c] + self.lam * rest * q1
                curv[c] = curv[c] + self.lam * rest * q2
        return TensionJet(value, grad, curv)

    def jet(self, fields: Sequence) -> TensionJet:
        """
        Regularised evaluation: arguments are clamped to [-CLAMP, CLAMP], the value is
        continued linearly outside, so the gradient stays bounded and Lipschitz.
        """
        if len(fields) != self.n_fields:
            raise ValueError(f"gamma_{self.index} takes {self.n_fields} fields, got {len(fields)}")
        z = [np.asarray(f, dtype=np.float64) for f in fields]
        shape = np.broadcast_shapes(*(x.shape for x in z))
        zc = [np.clip(x, -CLAMP, CLAMP) for x in z]
        raw = self.raw_jet(zc)
        value = raw.value
        for g, x, xc in zip(raw.gradient, z, zc):
            value = value + g * (x - xc)
        curv = [np.where(x == xc, c, 0.0) for c, x, xc in zip(raw.curvature, z, zc)]
        return TensionJet(
            np.broadcast_to(value, shape).copy(),
            [np.broadcast_to(g, shape).copy() for g in raw.gradient],
            [np.broadcast_to(c, shape).copy() for c in curv],
        )


def _check_alpha(alpha: float, allow_unstable_alpha: bool) -> None:
    if alpha <= 3.0 and not allow_unstable_alpha:
        raise ConfigError("alpha", f"must be > 3 for the absent-phase minima to be stable, got {alpha}")


def gamma1_ternary(phi2, s: SurfaceTensions, alpha: float = DEFAULT_ALPHA):
    _check_alpha(alpha, False)
    _, s12, s13 = s.triple
    z = np.asarray(phi2, dtype=np.float64)
    a, a1, _ = _blend(z)
    b, b1, _ = _blend_flip(z)
    q, q1, _ = _bump(z)
    lam = KAPPA * alpha / 16.0 * abs(s12 - s13)
    value = KAPPA * (s12 * b + s13 * a) + lam * q
    derivative = KAPPA * (s12 * b1 + s13 * a1) + lam * q1
    return value, derivative


def gamma2_ternary(psi, s: SurfaceTensions, alpha: float = DEFAULT_ALPHA):
    _check_alpha(alpha, False)
    s23 = s.sigma(2, 3)
    z = np.asarray(psi, dtype=np.float64)
    a, a1, _ = _blend(z)
    q, q1, _ = _bump(z)
    lam = KAPPA * alpha / 16.0 * s23
    return KAPPA * s23 * a + lam * q, KAPPA * s23 * a1 + lam * q1


def _initial_lambda(tensions: SurfaceTensions, index: int, alpha: float) -> float:
    spread = [tensions.sigma(index, k) for k in range(index + 1, tensions.n_phases + 1)]
    if index >= 2:
        spread.append(0.0)
    return KAPPA * alpha / 16.0 * (max(spread) - min(spread))


def _faces(n_fields: int, index: int) -> list[tuple[int, float]]:
    """(coordinate, value) of every cube face on which gamma_index must be flat and convex."""
    faces = [(c, 1.0) for c in range(n_fields) if c != index - 1]
    if index < n_fields:
        faces.append((n_fields - 1, -1.0))
    return faces


def _face_samples(n_fields: int, index: int, coord: int, value: float, samples: int) -> list[np.ndarray]:
    free = [c for c in range(n_fields) if c not in (coord, index - 1)]
    axis = np.linspace(-1.0, 1.0, samples)
    grid = _sample_grid(axis, len(free))
    points = [np.zeros(len(grid)) for _ in range(n_fields)]
    points[coord] = np.full(len(grid), value)
    for k, c in enumerate(free):
        points[c] = grid[:, k]
    return points


def _worst_face_curvature(fn: TensionFunction, samples: int = 5) -> float:
    worst = np.inf
    for coord, value in _faces(fn.n_fields, fn.index):
        points = _face_samples(fn.n_fields, fn.index, coord, value, samples)
        worst = min(worst, float(np.min(fn.jet(points).curvature[coord])))
    return worst


@lru_cache(maxsize=None)
def _build_functions(
    tensions: SurfaceTensions, alpha: float, stabilize: bool
) -> tuple[tuple[TensionFunction, ...], tuple[int, ...]]:
    n = tensions.n_phases
    d = n - 1
    if n == 2:
        return (TensionFunction(tensions, 1, 0.0, ()),), (0,)

    functions, escalations = [], []
    for i in range(1, n):
        projectors = []
        for j in range(1, n - 1):
            if j == i:
                continue
            lower, _ = _build_functions(tensions.without_phase(j), alpha, stabilize)
            reduced_index = i if i < j else i - 1
            projectors.append(_Projector(j - 1, ((_blend, lower[reduced_index - 1]),)))
        if i < d:
            upper_face, _ = _build_functions(tensions.without_phase(n - 1), alpha, stabilize)
            lower_face, _ = _build_functions(tensions.without_phase(n), alpha, stabilize)
            projectors.append(_Projector(d - 1, ((_blend, upper_face[i - 1]), (_blend_flip, lower_face[i - 1]))))

        lam = _initial_lambda(tensions, i, alpha)
        fn = TensionFunction(tensions, i, lam, tuple(projectors))
        count = 0
        while stabilize and count < MAX_ESCALATIONS and _worst_face_curvature(fn) < -CURVATURE_TOL:
            lam = 2.0 * lam if lam > 0 else KAPPA * alpha / 16.0 * max(tensions.upper)
            count += 1
            logger.warning(f"gamma_{i} of {n} phases: face curvature negative, raising Lambda to {lam:.6g}")
            fn = TensionFunction(tensions, i, lam, tuple(projectors))
        functions.append(fn)
        escalations.append(count)
    return tuple(functions), tuple(escalations)


@dataclass(frozen=True)
class GammaSet:
    tensions: SurfaceTensions
    alpha: float
    functions: tuple[TensionFunction, ...]
    escalations: tuple[int, ...]
    stabilized: bool = True
    _lipschitz: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_phases(self) -> int:
        return self.tensions.n_phases

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(fn.lam for fn in self.functions)

    def function(self, i: int) -> TensionFunction:
        if not 1 <= i <= self.n_phases - 1:
            raise IndexError(f"gamma index {i} out of range for {self.n_phases} phases")
        return self.functions[i - 1]

    def jet(self, i: int, fields: Sequence) -> TensionJet:
        return self.function(i).jet(fields)

    def value(self, i: int, fields: Sequence) -> np.ndarray:
        return self.jet(i, fields).value

    def gradient(self, i: int, fields: Sequence) -> list[np.ndarray]:
        return self.jet(i, fields).gradient

    def lipschitz(self, i: int, j: int, dense: int = 2001, coarse: int = 9) -> float:
        """max |d^2 gamma_i / d phi_j^2| over the clamped cube, by sampling."""
        key = (i, j)
        if key not in self._lipschitz:
            d = self.n_phases - 1
            if i == j or d == 1:
                self._lipschitz[key] = 0.0
            else:
                free = [c for c in range(d) if c not in (i - 1, j - 1)]
                outer = _sample_grid(np.linspace(-CLAMP, CLAMP, coarse), len(free))
                line = np.linspace(-CLAMP, CLAMP, dense)
                points = [np.zeros((len(outer), dense)) for _ in range(d)]
                points[j - 1] = np.broadcast_to(line, (len(outer), dense))
                for k, c in enumerate(free):
                    points[c] = np.broadcast_to(outer[:, k : k + 1], (len(outer), dense))
                curvature = self.jet(i, points).curvature[j - 1]
                self._lipschitz[key] = float(np.max(np.abs(curvature)))
        return self._lipschitz[key]


def build_gamma_n(s: SurfaceTensions, alpha: float = DEFAULT_ALPHA, allow_unstable_alpha: bool = False) -> GammaSet:
    """
    Build gamma_1 .. gamma_{N-1} for N phases.

    Each gamma_i interpolates its restrictions to the absent-phase faces of the cube
    (gamma_i of the N-1 phase system left over) and adds Lambda_i prod_{j != i}
    (1 - phi_j^2)^2. Lambda_i starts from the spread of the tensions phase i shares
    with later phases and is doubled while a face minimum is not convex.
    `allow_unstable_alpha` accepts alpha <= 3 and disables the doubling, for
    probing the failure mode.
    """
    _check_alpha(alpha, allow_unstable_alpha)
    functions, escalations = _build_functions(s, float(alpha), not allow_unstable_alpha)
    if any(escalations):
        logger.warning(f"Lambda escalated for {s.n_phases} phases: {escalations}")
    return GammaSet(s, float(alpha), functions, escalations, stabilized=not allow_unstable_alpha)


def _fd_curvature(fn: TensionFunction, points: list[np.ndarray], coord: int, step: float = FD_STEP) -> np.ndarray:
    plus = [p.copy() for p in points]
    minus = [p.copy() for p in points]
    plus[coord] = plus[coord] + step
    minus[coord] = minus[coord] - step
    centre = fn.jet(points).value
    return (fn.jet(plus).value - 2.0 * centre + fn.jet(minus).value) / step**2


def _projected_points(n_fields: int, fixed: dict[int, float], samples: int) -> list[np.ndarray]:
    free = [c for c in range(n_fields) if c not in fixed]
    axis = np.linspace(-1.0, 1.0, samples)
    grid = _sample_grid(axis, len(free))
    points = [np.full(len(grid), fixed.get(c, 0.0)) for c in range(n_fields)]
    for k, c in enumerate(free):
        points[c] = grid[:, k].copy()
    return points


def verify_consistency(g: GammaSet, s: SurfaceTensions | None = None, tol: float = 1e-10, samples: int = 5):
    """
    Sample the four consistency conditions of a GammaSet.

    Mechanic: gamma_i equals KAPPA * sigma_ik on the i|k interfaces and vanishes in
    the bulk of every earlier phase. Energetic: restricted to an absent-phase face,
    gamma_i equals the gamma of the reduced system. Algebraic: the gradient normal
    to every such face vanishes. Dynamic: the normal curvature there is positive
    (central differences); exactly zero curvature is reported as non-strict.
    """
    s = s or g.tensions
    n, d = s.n_phases, s.n_phases - 1
    mechanic_res = energetic_res = algebraic_res = 0.0
    min_curvature = np.inf
    non_strict: list[str] = []
    failures: list[str] = []

    for i, fn in enumerate(g.functions, start=1):
        for k in range(i + 1, n + 1):
            fixed = {c: 1.0 for c in range(min(k, n) - 1) if c != i - 1}
            if k <= d:
                fixed[k - 1] = -1.0
            points = _projected_points(d, fixed, samples)
            residual = float(np.max(np.abs(fn.jet(points).value - KAPPA * s.sigma(i, k))))
            mechanic_res = max(mechanic_res, residual)
        for bulk in range(1, i):
            fixed = {c: 1.0 for c in range(bulk - 1)}
            fixed[bulk - 1] = -1.0
            residual = float(np.max(np.abs(fn.jet(_projected_points(d, fixed, samples)).value)))
            mechanic_res = max(mechanic_res, residual)

        for coord, value in _faces(d, i):
            points = _face_samples(d, i, coord, value, samples)
            jet = fn.jet(points)
            algebraic_res = max(algebraic_res, float(np.max(np.abs(jet.gradient[coord]))))

            curvature = _fd_curvature(fn, points, coord)
            worst = float(np.min(curvature))
            min_curvature = min(min_curvature, worst)
            label = f"gamma_{i} across phi_{coord + 1}={value:+g}"
            if worst < -CURVATURE_TOL:
                failures.append(label)
            elif worst <= CURVATURE_TOL:
                non_strict.append(label)

            if n > 2:
                absent = coord + 1 if value > 0 else n
                reduced_index = i if i < absent else i - 1
                lower, _ = _build_functions(s.without_phase(absent), g.alpha, g.stabilized)
                reduced = [p for c, p in enumerate(points) if c != coord]
                expected = lower[reduced_index - 1].jet(reduced).value
                energetic_res = max(energetic_res, float(np.max(np.abs(jet.value - expected))))

    report = ConsistencyReport(
        n_phases=n,
        alpha=g.alpha,
        lambdas=list(g.lambdas),
        escalations=list(g.escalations),
        mechanic=mechanic_res <= tol,
        energetic=energetic_res <= tol,
        algebraic=algebraic_res <= tol,
        dynamic=not failures,
        mechanic_residual=mechanic_res,
        energetic_residual=energetic_res,
        algebraic_residual=algebraic_res,
        min_face_curvature=float(min_curvature) if np.isfinite(min_curvature) else 0.0,
        non_strict=non_strict,
        dynamic_failures=failures,
    )
    logger.info(
        f"Consistency of {n}-phase gammas: mechanic={report.mechanic} energetic={report.energetic} "
        f"algebraic={report.algebraic} dynamic={report.dynamic}"
    )
    return report
