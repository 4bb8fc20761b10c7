"""Config handling, CSV round trip, run comparison, and the CLI surface."""

from __future__ import annotations

import pytest

from devfsim.cli import main
from devfsim.errors import InvalidConfig, MissingMetric
from devfsim.harness import (
    MetricsRecord,
    ScenarioConfig,
    compare_runs,
    read_csv,
    run_scenario,
    validate_config,
    write_csv,
)

CONFIG_TEXT = """\
[scenario]
name = cache_hit
seed = 9
mode = nonblocking
has = software
memvirt = shadow
guests = 2
vcpus = 2

[device.cam]
mode = blocking
"""


class TestConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text(CONFIG_TEXT)
        config = ScenarioConfig.from_file(path)
        assert config.scenario == "cache_hit"
        assert config.seed == 9
        assert config.mode == "nonblocking"
        assert config.guests == 2 and config.vcpus == 2
        assert config.device_modes == {"cam": "blocking"}

    def test_unknown_scenario_rejected(self):
        with pytest.raises(InvalidConfig):
            validate_config(ScenarioConfig(scenario="nope"))

    def test_hardware_has_with_tdp_guest_names_the_constraint(self):
        config = ScenarioConfig(scenario="cache_hit", has_mode="hardware",
                                mem_mode="tdp")
        with pytest.raises(InvalidConfig) as exc:
            validate_config(config)
        assert "TDP" in str(exc.value)

    def test_hardware_has_with_shadow_guest_is_fine(self):
        validate_config(ScenarioConfig(scenario="cache_hit", has_mode="hardware",
                                       mem_mode="shadow"))

    def test_guest_and_vcpu_floors(self):
        with pytest.raises(InvalidConfig):
            validate_config(ScenarioConfig(guests=0))


class TestCsv:
    def test_write_read_roundtrip(self, tmp_path):
        rows = [MetricsRecord("s", "r", "alpha", 1.5, "ms"),
                MetricsRecord("s", "r", "beta", 7.0, "count")]
        path = tmp_path / "m.csv"
        write_csv(rows, path)
        assert read_csv(path) == rows
        header = path.read_text().splitlines()[0]
        assert header == "scenario,run_id,metric,value,unit"


class TestCompareRuns:
    def _csvs(self, tmp_path):
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        write_csv([MetricsRecord("s", "a", "slowdown", 2.5, "ratio"),
                   MetricsRecord("s", "a", "ops", 100, "count")], a)
        write_csv([MetricsRecord("s", "b", "slowdown", 1.1, "ratio"),
                   MetricsRecord("s", "b", "ops", 100, "count")], b)
        return a, b

    def test_ordering_assertion(self, tmp_path):
        a, b = self._csvs(tmp_path)
        report = compare_runs(a, b, ["a.slowdown > b.slowdown"])
        assert report[0].passed

    def test_reflexive_tolerant_equality(self, tmp_path):
        a, b = self._csvs(tmp_path)
        report = compare_runs(a, a, ["a.slowdown ~= b.slowdown",
                                     "a.ops == b.ops"])
        assert all(r.passed for r in report)

    def test_literal_comparison(self, tmp_path):
        a, b = self._csvs(tmp_path)
        report = compare_runs(a, b, ["a.slowdown >= 2.0", "b.slowdown <= 1.2"])
        assert all(r.passed for r in report)

    def test_missing_metric(self, tmp_path):
        a, b = self._csvs(tmp_path)
        with pytest.raises(MissingMetric):
            compare_runs(a, b, ["a.absent > b.slowdown"])


class TestRunScenario:
    def test_writes_csv_and_summary(self, tmp_path):
        config = ScenarioConfig(scenario="cache_hit", out_dir=str(tmp_path),
                                mem_mode="shadow", iterations=200)
        run = run_scenario(config)
        assert run.exit_code == 0
        assert run.csv_path.exists() and run.summary_path.exists()
        assert run.summary_path.read_text().startswith("PASS hit_rate>=0.85")

    def test_invalid_config_raises_before_running(self, tmp_path):
        config = ScenarioConfig(scenario="cache_hit", has_mode="hardware",
                                mem_mode="tdp", out_dir=str(tmp_path))
        with pytest.raises(InvalidConfig):
            run_scenario(config)


class TestCli:
    def test_list_scenarios(self, capsys):
        assert main(["--list-scenarios"]) == 0
        out = capsys.readouterr().out
        assert "cache_hit" in out and "mode_equivalence" in out

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        code = main(["--scenario", "cache_hit", "--has", "hardware",
                     "--memvirt", "tdp", "--out", str(tmp_path)])
        assert code == 2
        assert "TDP" in capsys.readouterr().err

    def test_flags_override_config_file(self, tmp_path, capsys):
        conf = tmp_path / "c.conf"
        conf.write_text(CONFIG_TEXT)
        code = main(["--config", str(conf), "--scenario", "cache_hit",
                     "--guests", "1", "--vcpus", "1", "--seed", "3",
                     "--memvirt", "tdp", "--mode", "blocking",
                     "--out", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "cache_hit_cache_hit-s3.csv").exists()


class TestWatchdogAndExitCodes:
    def test_watchdog_fails_a_hung_scenario(self, monkeypatch):
        import time as _time
        from devfsim import harness

        def hang(config):
            _time.sleep(60)

        monkeypatch.setitem(harness.SCENARIOS, "cache_hit", (hang, -9))
        run = run_scenario(ScenarioConfig(scenario="cache_hit"),
                           write_files=False)
        assert run.exit_code == 1
        assert run.assertions[0].name == "watchdog"

    def test_failed_assertion_exits_1(self, monkeypatch, tmp_path):
        from devfsim import harness
        from devfsim.harness import AssertionResult, Recorder

        def failing(config):
            rec = Recorder(config)
            rec.add("x", 1, "count")
            return rec, [AssertionResult("always_fails", False, "by design")]

        monkeypatch.setitem(harness.SCENARIOS, "cache_hit", (failing, 5))
        assert main(["--scenario", "cache_hit", "--out", str(tmp_path)]) == 1


class TestRunWorkloadFacade:
    def test_cpu_loop_reports_progress(self):
        from devfsim.workloads import run_workload
        from devfsim.world import World

        world = World()
        try:
            guest = world.add_guest()
            process = world.new_process(guest)
            result = run_workload(guest, process, "cpu_loop",
                                  {"duration_s": 0.05})
            assert result.kind == "cpu_loop"
            assert result.progress > 0 and result.rate > 0
        finally:
            world.close()

    def test_render_loop_reports_frames(self):
        from devfsim.devices import FbDevice
        from devfsim.workloads import run_workload
        from devfsim.world import World

        world = World()
        try:
            guest = world.add_guest()
            fb = world.add_device(FbDevice(3, "fb", world.clock))
            process = world.new_process(guest)
            world.map_buffer(process, 0x2000_0000, 1)
            frontend = world.frontends[guest.id]
            from conftest import run_in_guest
            handle = run_in_guest(
                world, process,
                lambda t: __import__("devfsim.workloads", fromlist=["open_device"])
                .open_device(frontend, t, frontend.files["/dev/fb"]))
            result = run_workload(guest, process, "render_loop", {
                "frontend": frontend, "file": frontend.files["/dev/fb"],
                "handle": handle, "buf_gva": 0x2000_0000,
                "duration_s": 0.1, "work_s": 0.002})
            assert result.progress > 0
        finally:
            world.close()


class TestDeviceModes:
    def test_device_section_overrides_scenario_default(self):
        from devfsim.harness import device_mode
        config = ScenarioConfig(mode="nonblocking",
                                device_modes={"cam": "blocking"})
        assert device_mode(config, "cam") == "blocking"
        assert device_mode(config, "mouse") == "nonblocking"
