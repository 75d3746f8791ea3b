import json

import numpy as np
import pytest

from app.api.cli import load_config, main
from app.api.schemas import AngleReport, DiagnosticsRecord, ExperimentConfig, ExperimentSummary
from app.config import parse_config
from app.db import ArtifactStore
from app.db.snapshots import field_names, read_snapshot, write_snapshot
from app.exceptions import AcceptanceError, ConfigError, SnapshotFormatError, SolverError
from app.services.model import ModelParams, PhaseState, init_preset
from app.services.reporting import generate_series_csv, read_series_csv, series_header
from app.services.tension import SurfaceTensions
from app.utils.grid_field import Grid2D, ScalarField
from app.workers.presets import get_preset, list_presets, resolve_config, sigma_cases
from tests.conftest import constant_state


def test_empty_config_keeps_defaults():
    assert parse_config("") == ExperimentConfig()


def test_config_parses_lists_and_comments():
    cfg = parse_config("# tensions first\nsigma = 1,2,2\nnx = 65 # nodes\nsigma_cases = 1,1,1; 1,2,2\n")
    assert cfg.sigma == (1.0, 2.0, 2.0)
    assert cfg.nx == 65
    assert cfg.sigma_cases == ((1.0, 1.0, 1.0), (1.0, 2.0, 2.0))
    assert cfg.model_fields_set == {"sigma", "nx", "sigma_cases"}


@pytest.mark.parametrize(
    "text, key",
    [("tau = -1", "tau"), ("colour = blue", "colour"), ("sigma = 1,2", "sigma"), ("nx", "nx"), ("mobility = 0", "mobility")],
)
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key


def test_load_config_overrides_count_as_set(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("epsilon = 0.05\n")
    cfg = load_config(path, preset="liquid_lens", output_dir=None)
    assert cfg.preset == "liquid_lens"
    assert cfg.epsilon == 0.05
    assert {"preset", "epsilon"} <= cfg.model_fields_set
    assert "output_dir" not in cfg.model_fields_set
    with pytest.raises(ConfigError, match="config"):
        load_config(tmp_path / "missing.cfg")


def test_snapshot_round_trip_is_exact(tmp_path, rng):
    grid = Grid2D(9, 13, lx=1.0, ly=1.5)
    state = PhaseState(tuple(ScalarField(grid, rng.standard_normal(grid.shape)) for _ in range(2)), 0.37)
    path = write_snapshot(state, tmp_path / "state.snap")
    loaded = read_snapshot(path)
    assert (loaded.grid.nx, loaded.grid.ny, loaded.grid.lx, loaded.grid.ly) == (9, 13, 1.0, 1.5)
    assert loaded.time == 0.37
    for a, b in zip(loaded.fields, state.fields):
        assert np.array_equal(a.values, b.values)


def test_field_names():
    assert field_names(2) == ["psi", "phi"]
    assert field_names(3) == ["phi1", "phi2", "phi3"]


def test_snapshot_with_wrong_magic_is_rejected(tmp_path, grid):
    path = write_snapshot(constant_state(grid, 1.0, 0.0), tmp_path / "state.snap")
    path.write_bytes(b"NOTASNAP" + path.read_bytes()[8:])
    with pytest.raises(SnapshotFormatError, match="magic"):
        read_snapshot(path)


def test_truncated_snapshot_is_rejected(tmp_path, grid):
    path = write_snapshot(constant_state(grid, 1.0, 0.0), tmp_path / "state.snap")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(SnapshotFormatError, match="truncated"):
        read_snapshot(path)
    with pytest.raises(SnapshotFormatError):
        read_snapshot(tmp_path / "absent.snap")


@pytest.fixture
def record():
    return DiagnosticsRecord(
        steps=[0, 1],
        times=[0.0, 0.1],
        energies=[1.0, 0.1 + 0.2],
        volumes=[[0.5, 0.25, 0.25], [0.5, 0.25, 0.25]],
        means=[[0.0, 0.5], [0.0, 0.5]],
        minima=[[-1.0, -1.0], [-0.99, -1.0]],
        maxima=[[1.0, 1.0], [1.0, 0.98]],
    )


def test_series_csv_layout(record):
    text = generate_series_csv(record).getvalue().decode()
    lines = text.splitlines()
    assert lines[0] == "t,W,V1,V2,V3,min_f1,max_f1,min_f2,max_f2"
    assert lines[2].split(",")[1] == "0.30000000000000004"
    header, rows = read_series_csv(text)
    assert header == series_header(2)
    assert rows[1][1] == 0.1 + 0.2
    assert len(rows) == 2


def test_artifact_session_keeps_files_on_failure(tmp_path, record):
    store = ArtifactStore(tmp_path)
    with pytest.raises(SolverError):
        with store.session("broken") as artifacts:
            artifacts.series(record)
            raise SolverError("stalled", 1e-3, 200)
    directory = tmp_path / "broken"
    assert (directory / "series.csv").exists()
    failure = json.loads((directory / "failure.json").read_text())
    assert failure["error"] == "SolverError"


def test_preset_catalog():
    names = [info.name for info in list_presets()]
    assert len(names) == 8
    assert names == [info.name for info in list_presets()]
    assert "two_droplets" in names
    with pytest.raises(ConfigError) as info:
        get_preset("bogus")
    assert info.value.key == "preset"


def test_every_preset_initial_condition_exists():
    grid = Grid2D(17, 17)
    p = ModelParams.create(0.1, SurfaceTensions.ternary(1.0, 1.0, 1.0))
    for info in list_presets():
        for name in [info.defaults["initial"], *info.case_initials.values()]:
            assert init_preset(name, p, grid).n_phases == 3


def test_resolve_config_fills_only_unset_keys():
    cfg = resolve_config(ExperimentConfig(preset="neumann_angle", nx=65))
    assert cfg.nx == 65
    assert cfg.ny == 129
    assert cfg.epsilon == 0.015
    assert cfg.mobility == (1e-3,)
    assert len(sigma_cases(cfg)) == 3
    assert not cfg.paper_scale


def test_explicit_sigma_replaces_the_sweep():
    cfg = resolve_config(ExperimentConfig(preset="neumann_angle", sigma=(1.0, 2.0, 2.0)))
    assert sigma_cases(cfg) == [(1.0, 2.0, 2.0)]


def test_paper_scale_overrides():
    cfg = resolve_config(ExperimentConfig(preset="two_droplets"), paper_scale=True)
    assert cfg.paper_scale
    assert (cfg.nx, cfg.epsilon, cfg.t_end) == (401, 0.01, 50.0)
    assert cfg.mobility == (1e-3,)


@pytest.mark.parametrize("paper_scale", [False, True])
def test_lens_and_droplet_presets(paper_scale):
    lens = resolve_config(ExperimentConfig(preset="liquid_lens"), paper_scale=paper_scale)
    droplets = resolve_config(ExperimentConfig(preset="two_droplets"), paper_scale=paper_scale)
    assert lens.mobility == droplets.mobility == (1e-3,)
    assert lens.epsilon == 0.02
    assert (1.0, 100.0, 100.0) in sigma_cases(droplets)


def test_energy_and_volume_presets_start_from_the_square_cross():
    energy = resolve_config(ExperimentConfig(preset="energy_stability"))
    volume = resolve_config(ExperimentConfig(preset="volume_conservation"))
    assert energy.initial == volume.initial == "square_cross"
    assert sigma_cases(volume) == [(1.0, 1.0, 1.0), (1.0, 2.0, 2.0), (1.0, 0.9, 1.1)]
    assert len(sigma_cases(energy)) == 4


def test_cli_lists_presets(capsys):
    assert main(["presets"]) == 0
    out = capsys.readouterr().out
    assert len(out.strip().splitlines()) == 8
    assert "accuracy_space" in out


def test_cli_run_passes_overrides(mocker, tmp_path, capsys):
    run = mocker.patch(
        "app.api.cli.run_experiment", return_value=ExperimentSummary(preset="liquid_lens", parameters={})
    )
    assert main(["run", "--preset", "liquid_lens", "--out", str(tmp_path)]) == 0
    cfg = run.call_args.args[0]
    assert cfg.preset == "liquid_lens"
    assert cfg.output_dir == str(tmp_path)
    assert run.call_args.kwargs["assert_checks"] is False
    assert json.loads(capsys.readouterr().out)["preset"] == "liquid_lens"


@pytest.mark.parametrize(
    "error, code",
    [
        (SolverError("stalled", 1e-3, 200), 3),
        (AcceptanceError("acceptance checks failed: x"), 4),
        (ConfigError("tau", "too large"), 2),
    ],
)
def test_cli_run_exit_codes(mocker, error, code):
    mocker.patch("app.api.cli.run_experiment", side_effect=error)
    assert main(["run", "--assert"]) == code


def test_cli_rejects_bad_config_file(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("tau = -1\n")
    assert main(["run", "--config", str(path)]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_cli_check_gamma(tmp_path, capsys):
    path = tmp_path / "gamma.cfg"
    path.write_text("sigma = 1,2,2\nalpha = 3.5\n")
    assert main(["check-gamma", "--config", str(path), "--assert"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["mechanic"] and report["dynamic"]


def test_cli_check_gamma_assert_fails(mocker):
    mocker.patch("app.api.cli.verify_consistency", return_value=mocker.Mock(passed=False, model_dump_json=lambda **_: "{}"))
    assert main(["check-gamma", "--assert"]) == 4
    assert main(["check-gamma"]) == 0


def test_cli_angles_reads_the_snapshot(mocker, tmp_path, capsys):
    p = ModelParams.create(0.05, SurfaceTensions.ternary(1.0, 1.0, 1.0))
    state = init_preset("liquid_lens", p, Grid2D(33, 33))
    path = write_snapshot(state, tmp_path / "lens.snap")
    config = tmp_path / "lens.cfg"
    config.write_text("epsilon = 0.05\n")
    measure = mocker.patch(
        "app.api.cli.final_state_angles",
        return_value=AngleReport(theta23=120.0, theta12=120.0, theta13=120.0, junction=(0.35, 0.5), fit_residuals=[0.0] * 3),
    )
    assert main(["angles", str(path), "--config", str(config)]) == 0
    loaded, epsilon = measure.call_args.args
    assert np.array_equal(loaded.psi.values, state.psi.values)
    assert epsilon == 0.05
    assert json.loads(capsys.readouterr().out)["theta23"] == 120.0


def test_cli_angles_without_junction(tmp_path):
    path = write_snapshot(constant_state(Grid2D(17, 17), 1.0, 1.0), tmp_path / "pure.snap")
    assert main(["angles", str(path)]) == 1
    assert main(["angles", str(tmp_path / "absent.snap")]) == 1
