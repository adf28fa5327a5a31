import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

from adaptive_irgnm.core.config import (
    ConfigManager,
    ProblemConfig,
    RunConfig,
    StudyConfig,
    build_problem,
    data_cells,
    get_function,
    source_element,
)
from adaptive_irgnm.core.errors import ConfigError

CONFIG_DIR = Path(__file__).parent.parent / "configs"

SAMPLE = """\
# sample run
[problem]
kind = dense
size = 6

[run]
tau = 5.0  # inflated discrepancy
c_tc = 0.0
beta_init = none
max-dofs = 500

; study settings
[study]
deltas = 1e-1, 1e-2
output_dir = out
"""


class TestConfigManager:
    @pytest.fixture
    def temp_config_file(self):
        """Create a temporary config file path for testing"""
        with tempfile.NamedTemporaryFile(mode="w", delete=False, suffix=".ini") as f:
            temp_path = f.name
        os.unlink(temp_path)
        yield temp_path
        # Cleanup
        if os.path.exists(temp_path):
            os.unlink(temp_path)

    def _write(self, path: str, content: str) -> None:
        with open(path, "w") as f:
            f.write(content)

    def test_parse_sections(self, temp_config_file):
        self._write(temp_config_file, SAMPLE)

        manager = ConfigManager(temp_config_file)

        assert manager.config_path == Path(temp_config_file)
        assert manager.problem.kind == "dense"
        assert manager.problem.size == 6
        assert manager.run.tau == 5.0
        assert manager.run.c_tc == 0.0
        assert manager.run.beta_init is None
        assert manager.run.max_dofs == 500
        assert manager.study.deltas == [0.1, 0.01]
        assert manager.study.output_dir == "out"

    def test_defaults_without_file(self):
        manager = ConfigManager()

        assert manager.run == RunConfig()
        assert manager.problem == ProblemConfig()
        assert manager.study == StudyConfig()

    def test_missing_file(self, temp_config_file):
        with pytest.raises(RuntimeError, match="Failed to load config"):
            ConfigManager(temp_config_file)

    def test_unknown_key_reports_line(self, temp_config_file):
        self._write(temp_config_file, "[run]\ntau = 5.0\nsigma = 2\n")

        with pytest.raises(ConfigError, match="Unknown key 'sigma'") as exc_info:
            ConfigManager(temp_config_file)
        assert exc_info.value.line == 3
        assert str(exc_info.value).startswith(f"{temp_config_file}:3: ")

    def test_unknown_section(self, temp_config_file):
        self._write(temp_config_file, "[solver]\n")

        with pytest.raises(ConfigError, match="Unknown section") as exc_info:
            ConfigManager(temp_config_file)
        assert exc_info.value.line == 1

    def test_key_outside_section(self, temp_config_file):
        self._write(temp_config_file, "# header\ntau = 5.0\n")

        with pytest.raises(ConfigError, match="outside of any section") as exc_info:
            ConfigManager(temp_config_file)
        assert exc_info.value.line == 2

    def test_invalid_value(self, temp_config_file):
        self._write(temp_config_file, "[run]\ntau = large\n")

        with pytest.raises(ConfigError, match="Invalid value 'large' for tau"):
            ConfigManager(temp_config_file)

    def test_malformed_line(self, temp_config_file):
        self._write(temp_config_file, "[run]\njust words\n")

        with pytest.raises(ConfigError, match="Cannot parse line"):
            ConfigManager(temp_config_file)

    def test_save_and_reload(self, temp_config_file):
        self._write(temp_config_file, SAMPLE)
        manager = ConfigManager(temp_config_file)
        manager.save(temp_config_file)

        reloaded = ConfigManager(temp_config_file)

        assert reloaded.to_dict() == manager.to_dict()
        assert "beta_init = none" in Path(temp_config_file).read_text()

    def test_override_skips_none(self, temp_config_file):
        self._write(temp_config_file, SAMPLE)
        manager = ConfigManager(temp_config_file)

        manager.override("run", seed=7, delta=None)

        assert manager.run.seed == 7
        assert manager.run.delta == RunConfig().delta

    def test_shipped_configs_parse(self):
        coefficient = ConfigManager(CONFIG_DIR / "coefficient.ini")
        dense = ConfigManager(CONFIG_DIR / "dense.ini")

        assert coefficient.problem.kind == "coefficient"
        assert coefficient.study.levels == [8, 16, 32, 64, 128, 256]
        assert dense.problem.kind == "dense"
        assert dense.study.deltas == [1e-1, 3e-2, 1e-2, 1e-3, 1e-4]
        assert dense.problem.source_decay == 0.5
        assert dense.run.c_tc == 0.0


class TestRunConfig:
    def test_beta_search_settings(self):
        cfg = RunConfig(tau_beta=3.0, max_beta_steps=7, beta_init=0.5)
        bcfg = cfg.beta_search()

        assert bcfg.tau_beta == 3.0
        assert bcfg.max_newton_steps == 7
        assert bcfg.beta_init == 0.5
        assert bcfg.theta_lower == cfg.theta_lower

    def test_slack(self):
        cfg = RunConfig(r0=1.0, rho_r=0.5)

        assert cfg.slack(0) == 1.0
        assert cfg.slack(3) == 0.125
        assert RunConfig().slack(5) == 0.0


class TestBuildProblem:
    def test_coefficient_benchmark(self):
        pcfg = ProblemConfig(kind="coefficient", cells=8, fine_factor=4)
        bench = build_problem(pcfg, RunConfig(delta=0.05, max_dofs=500))
        assert bench.problem.data.mesh.n_cells == 2048

        assert bench.mesh.n_cells == 8
        assert bench.problem.delta == 0.05
        np.testing.assert_allclose(bench.q_start, np.ones(9))
        assert bench.source is None

    def test_dense_benchmark(self):
        pcfg = ProblemConfig(kind="dense", size=5, decay=1.0, source_scale=2.0)
        bench = build_problem(pcfg, RunConfig(delta=0.01), seed=3)
        T = bench.problem.T

        np.testing.assert_allclose(np.diag(T), 1.0 / np.arange(1, 6))
        np.testing.assert_allclose(bench.q_start, np.zeros(5))
        assert np.linalg.norm(bench.problem.data - T @ bench.q_true) == pytest.approx(0.01)
        assert bench.source.s_norm == pytest.approx(2.0)

    def test_integration_operator(self):
        bench = build_problem(ProblemConfig(kind="dense", size=4, operator="integration"), RunConfig())

        np.testing.assert_allclose(bench.problem.T, np.tril(np.ones((4, 4))) / 4)

    def test_seed_changes_noise(self):
        pcfg = ProblemConfig(kind="dense", size=5)
        first = build_problem(pcfg, RunConfig(), seed=1).problem.data
        second = build_problem(pcfg, RunConfig(), seed=2).problem.data

        assert not np.allclose(first, second)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="Unknown problem kind"):
            build_problem(ProblemConfig(kind="wave"), RunConfig())

    def test_unknown_operator(self):
        with pytest.raises(ConfigError, match="Unknown dense operator"):
            build_problem(ProblemConfig(kind="dense", operator="fourier"), RunConfig())

    def test_get_function(self):
        np.testing.assert_allclose(get_function("parabola")(np.array([0.5])), [1.0])
        with pytest.raises(ConfigError, match="Unknown function"):
            get_function("cosine")

    def test_data_mesh_outgrows_working_meshes(self):
        pcfg = ProblemConfig(cells=16, fine_factor=4)

        assert data_cells(pcfg, RunConfig(max_dofs=1000)) == 4096
        assert data_cells(pcfg, RunConfig(max_dofs=10)) == 64
        assert data_cells(pcfg, RunConfig(max_dofs=1000), StudyConfig(levels=[8, 512], fine_factor=4)) == 8192

    def test_borderline_source_element(self):
        T = np.diag(1.0 / np.arange(1, 6))
        s = source_element(T, ProblemConfig(source_scale=3.0, source_decay=0.5))
        weights = 1.0 / np.sqrt(np.arange(1, 6))

        assert np.linalg.norm(s) == pytest.approx(3.0)
        np.testing.assert_allclose(np.abs(s), 3.0 * weights / np.linalg.norm(weights), atol=1e-12)
