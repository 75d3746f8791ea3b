import numpy as np
import pytest

from app.exceptions import GridMismatchError
from app.services.model import (
    ModelParams,
    PhaseState,
    chem_potentials,
    double_well,
    free_energy,
    init_preset,
    lipschitz_double_well,
    mobility,
    phase_fractions,
    spreading_coefficients,
    volumes,
)
from app.services.tension import SurfaceTensions
from app.utils.grid_field import Grid2D, ScalarField, inner
from tests.conftest import constant_state


def test_double_well_values():
    F, f, df = double_well(np.array([-1.0, 0.0, 1.0]))
    np.testing.assert_allclose(F, [0.0, 0.25, 0.0])
    np.testing.assert_allclose(f, [0.0, 0.0, 0.0])
    np.testing.assert_allclose(df, [2.0, -1.0, 2.0])


def test_double_well_is_clamped():
    F, f, df = double_well(np.array([1.2]))
    F_edge, f_edge, _ = double_well(np.array([1.1]))
    assert f[0] == pytest.approx(f_edge[0])
    assert F[0] == pytest.approx(F_edge[0] + 0.1 * f_edge[0])
    assert df[0] == 0.0
    assert lipschitz_double_well() == pytest.approx(2.63)


def test_params_broadcast_scalars(tensions):
    p = ModelParams.create(0.02, tensions, mobility=2e-4, mob_exponents=3)
    assert p.mobility == (2e-4, 2e-4)
    assert p.mob_exponents == (3,)
    assert p.epsilons == (0.02, 0.02)
    with pytest.raises(ValueError):
        ModelParams.create(0.0, tensions)
    with pytest.raises(ValueError):
        ModelParams.create(0.02, tensions, mobility=(1e-4, -1.0))


def test_phase_state_requires_one_grid():
    a = ScalarField.constant(Grid2D(5, 5), 1.0)
    b = ScalarField.constant(Grid2D(7, 7), 1.0)
    with pytest.raises(GridMismatchError):
        PhaseState((a, b))


def test_free_energy_of_pure_phase_is_zero(grid, params):
    assert free_energy(constant_state(grid, 1.0, 1.0), params) == 0.0


def test_free_energy_vanishes_in_phase_one_bulk(grid, params):
    # F(-1) = 0 kills the psi term and gamma_2(-1) = 0 kills the phi term
    assert free_energy(constant_state(grid, -1.0, 0.0), params) == pytest.approx(0.0, abs=1e-14)


def test_flat_interface_energy_equals_its_tension():
    grid = Grid2D(5, 257)
    eps = 0.02
    p = ModelParams.create(eps, SurfaceTensions.ternary(1.0, 1.0, 1.0))
    xx, yy = grid.coordinates()
    psi = ScalarField(grid, np.tanh((yy - 0.5) / (np.sqrt(2) * eps)))
    state = PhaseState((psi, ScalarField.constant(grid, 1.0)))
    # phases 1 (below) and 3 (above) meet along a unit-length line
    assert free_energy(state, p) == pytest.approx(1.0, rel=0.03)


def test_chem_potentials_vanish_in_the_bulk(grid, params):
    for mu in chem_potentials(constant_state(grid, 1.0, 1.0), params):
        assert np.all(mu.values == 0.0)


def _profile_residual(n: int, eps: float) -> float:
    grid = Grid2D(n, 5)
    p = ModelParams.create(eps, SurfaceTensions.ternary(1.0, 1.0, 1.0))
    xx, _ = grid.coordinates()
    phi = ScalarField(grid, np.tanh((xx - 0.5) / (np.sqrt(2) * eps)))
    state = PhaseState((ScalarField.constant(grid, 1.0), phi))
    mu_phi = chem_potentials(state, p)[1].values
    interior = (xx > 0.2) & (xx < 0.8)
    return float(np.max(np.abs(mu_phi[interior])))


def test_tanh_profile_is_stationary_up_to_second_order():
    coarse, fine = _profile_residual(65, 0.05), _profile_residual(129, 0.05)
    assert fine < coarse
    assert 3.0 < coarse / fine < 5.0


def test_chem_potentials_are_the_energy_gradient(smooth_state, params):
    grid = smooth_state.grid
    xx, yy = grid.coordinates()
    directions = [np.cos(np.pi * xx) * yy, np.sin(np.pi * yy) * (xx - 0.3)]

    def shifted(t: float) -> PhaseState:
        return PhaseState(tuple(u.with_values(u.values + t * d) for u, d in zip(smooth_state.fields, directions)))

    t = 1e-5
    fd = (free_energy(shifted(t), params) - free_energy(shifted(-t), params)) / (2 * t)
    potentials = chem_potentials(smooth_state, params)
    analytic = sum(inner(mu, mu.with_values(d)) for mu, d in zip(potentials, directions))
    assert fd == pytest.approx(analytic, rel=1e-6)


def test_mobility_degenerates_in_phase_one(grid):
    p = ModelParams.create(0.05, SurfaceTensions.ternary(1.0, 1.0, 1.0), mobility=(2e-3, 1.0), mob_exponents=4)
    assert np.all(mobility(1, constant_state(grid, 0.3, 0.0), p).values == 2e-3)
    assert np.all(mobility(2, constant_state(grid, 1.0, 0.0), p).values == 1.0)
    np.testing.assert_allclose(mobility(2, constant_state(grid, 0.0, 0.0), p).values, 0.00390625)
    assert np.all(mobility(2, constant_state(grid, -1.0, 0.0), p).values == 0.0)
    with pytest.raises(IndexError):
        mobility(3, constant_state(grid, 0.0, 0.0), p)


def test_square_cross_volumes(params):
    grid = Grid2D(65, 65)
    state = init_preset("square_cross", params, grid)
    np.testing.assert_allclose(volumes(state), [0.5, 0.25, 0.25], atol=2 * params.epsilon)


def test_pure_phase_two_volumes(grid):
    state = constant_state(grid, 1.0, -1.0)
    np.testing.assert_allclose(volumes(state), [0.0, 1.0, 0.0], atol=1e-15)


def test_phase_fractions_partition_unity(grid, rng):
    state = PhaseState(tuple(ScalarField(grid, rng.uniform(-1, 1, grid.shape)) for _ in range(3)))
    total = sum(c.values for c in phase_fractions(state))
    np.testing.assert_allclose(total, 1.0, atol=1e-14)
    assert sum(volumes(state)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize(
    "sigma, coefficients, regime",
    [
        ((3.0, 1.0, 1.0), (-1.0, 3.0, 3.0), "total"),
        ((1.0, 1.0, 1.0), (1.0, 1.0, 1.0), "partial"),
        ((1.0, 1.0, 1.4), (1.4, 0.6, 1.4), "partial"),
        ((2.0, 1.0, 1.0), (0.0, 2.0, 2.0), "critical"),
    ],
)
def test_spreading_coefficients(sigma, coefficients, regime):
    report = spreading_coefficients(SurfaceTensions.ternary(*sigma))
    assert report.coefficients == pytest.approx(coefficients)
    assert report.regime == regime


def test_preset_values_at_known_points(params):
    grid = Grid2D(33, 33)
    cross = init_preset("square_cross", params, grid)
    assert cross.psi.values[16, 16] == pytest.approx(0.0, abs=1e-14)
    assert cross.phi.values[16, 16] == pytest.approx(0.0, abs=1e-14)

    droplets = init_preset("two_droplets_sym", params, grid)
    assert droplets.psi.values[0, 0] == pytest.approx(-1.0, abs=1e-6)

    lens = init_preset("liquid_lens", params, grid)
    assert lens.psi.values[16, 16] < -0.99


def test_preset_lookup_errors(params, grid):
    with pytest.raises(KeyError):
        init_preset("no_such_preset", params, grid)
    four = ModelParams.create(0.05, SurfaceTensions(4, (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)))
    with pytest.raises(ValueError):
        init_preset("liquid_lens", four, grid)
    layers = init_preset("stacked_layers", four, grid)
    assert layers.n_phases == 4


@pytest.mark.parametrize("seed", range(20))
def test_chem_potentials_match_random_directional_derivatives(smooth_state, params, seed):
    rng = np.random.default_rng(seed)
    directions = [0.1 * rng.standard_normal(smooth_state.grid.shape) for _ in smooth_state.fields]

    def shifted(t: float) -> PhaseState:
        return PhaseState(tuple(u.with_values(u.values + t * d) for u, d in zip(smooth_state.fields, directions)))

    t = 1e-5
    fd = (free_energy(shifted(t), params) - free_energy(shifted(-t), params)) / (2 * t)
    potentials = chem_potentials(smooth_state, params)
    analytic = sum(inner(mu, mu.with_values(d)) for mu, d in zip(potentials, directions))
    scale = sum(inner(mu.with_values(np.abs(mu.values)), mu.with_values(np.abs(d))) for mu, d in zip(potentials, directions))
    assert fd == pytest.approx(analytic, rel=1e-6, abs=1e-7 * scale)
