import csv
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from convevo import cli
from convevo import experiments as ex
from convevo.errors import ConfigError, FormatError, RunFailure, SearchExhausted
from convevo.evolution import RunRecord, read_run_log

BASE_LINES = [
    "[experiment]",
    "schema_version = 1",
    "name = tiny",
    "dataset = synth",
    "train_size = 32",
    "val_size = 16",
    "test_size = 16",
    "num_classes = 2",
    "image_size = 8x8x1",
    "difficulty = 0.5",
    "repetitions = 2",
    "base_seed = 11",
    "niche_rate = 0.25",
    "niche_depth = 2",
    "epoch_budget = 8",
    "batch_size = 16",
    "learning_rate = 0.001",
    "checkpoint_interval = 4",
    "filter_choices = 8,16",
    "kernel_choices = 1,3",
    "stride_choices = 1,2",
    "finetune_checkpoints = 4,final",
    "",
    "[arm inherit]",
    "inheritance = true",
    "epochs_per_eval = 2",
    "",
    "[arm baseline_i]",
    "inheritance = false",
    "epochs_per_eval = 2",
    "",
    "[arm baseline_ii]",
    "inheritance = false",
    "epochs_per_eval = 4",
]


def write_config(path, lines=None):
    path.write_text("\n".join(BASE_LINES if lines is None else lines) + "\n")
    return str(path)


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """One full three-arm experiment, shared by the artifact tests."""
    root = tmp_path_factory.mktemp("exp")
    cfg_path = root / "exp.ini"
    write_config(cfg_path)
    cfg = ex.parse_experiment_config(str(cfg_path))
    out = str(root / "out")
    result = ex.run_experiment(cfg, out)
    return cfg, out, result


class TestConfigParsing:
    def test_full_round_trip(self, tmp_path):
        cfg = ex.parse_experiment_config(write_config(tmp_path / "a.ini"))
        assert cfg.name == "tiny"
        assert cfg.dataset == "synth"
        assert cfg.image_size == (8, 8, 1)
        assert cfg.filter_choices == (8, 16)
        assert cfg.finetune_checkpoints == ("4", "final")
        assert [a.name for a in cfg.arms] == ["inherit", "baseline_i", "baseline_ii"]
        assert cfg.arms[0].inheritance is True
        assert cfg.arms[2].epochs_per_eval == 4

    def test_defaults(self, tmp_path):
        lines = [
            "[experiment]",
            "schema_version = 1",
            "[arm only]",
            "inheritance = yes",
            "epochs_per_eval = 4",
        ]
        cfg = ex.parse_experiment_config(write_config(tmp_path / "d.ini", lines))
        assert cfg.dataset == "synth"
        assert cfg.train_size == 4000 and cfg.val_size == 1000 and cfg.test_size == 1000
        assert cfg.image_size == (28, 28, 1)
        assert cfg.epoch_budget == 512 and cfg.batch_size == 512
        assert cfg.niche_rate == 0.1 and cfg.niche_depth == 5
        assert cfg.checkpoint_interval == 128
        assert cfg.filter_choices == (16, 32, 64, 96, 128, 192, 256)
        assert cfg.kernel_choices == (1, 3, 5)
        assert cfg.stride_choices == (1, 2)
        assert cfg.arms[0].inheritance is True  # "yes" parses as a boolean

    def test_seed_pairing_across_arms(self, tmp_path):
        cfg = ex.parse_experiment_config(write_config(tmp_path / "a.ini"))
        for rep in range(cfg.repetitions):
            seeds = {cfg.ea_config(arm, rep).seed for arm in cfg.arms}
            assert seeds == {cfg.base_seed + rep}

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            ex.parse_experiment_config(str(tmp_path / "absent.ini"))

    def test_missing_schema_version(self, tmp_path):
        lines = ["[experiment]", "[arm a]", "inheritance = true", "epochs_per_eval = 2"]
        with pytest.raises(ConfigError, match="schema_version"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_wrong_schema_version(self, tmp_path):
        lines = [
            "[experiment]",
            "schema_version = 99",
            "[arm a]",
            "inheritance = true",
            "epochs_per_eval = 2",
        ]
        with pytest.raises(ConfigError, match="schema_version"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_unknown_experiment_key(self, tmp_path):
        lines = BASE_LINES + ["mystery_knob = 3"]
        with pytest.raises(ConfigError, match="mystery_knob"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_unknown_section(self, tmp_path):
        lines = BASE_LINES + ["", "[tuning]", "x = 1"]
        with pytest.raises(ConfigError, match="tuning"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_unknown_arm_key(self, tmp_path):
        lines = BASE_LINES + ["momentum = 0.9"]  # lands in [arm baseline_ii]
        with pytest.raises(ConfigError, match="momentum"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_arm_needs_both_keys(self, tmp_path):
        lines = ["[experiment]", "schema_version = 1", "[arm a]", "inheritance = true"]
        with pytest.raises(ConfigError, match="epochs_per_eval"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_bad_arm_name(self, tmp_path):
        lines = [
            "[experiment]",
            "schema_version = 1",
            "[arm bad name!]",
            "inheritance = true",
            "epochs_per_eval = 2",
        ]
        with pytest.raises(ConfigError, match="arm name"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_duplicate_arm_section(self, tmp_path):
        lines = BASE_LINES + ["", "[arm inherit]", "inheritance = false", "epochs_per_eval = 2"]
        with pytest.raises(ConfigError):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_no_arms(self, tmp_path):
        lines = ["[experiment]", "schema_version = 1"]
        with pytest.raises(ConfigError, match="arm"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_bad_finetune_label(self, tmp_path):
        lines = [l for l in BASE_LINES if not l.startswith("finetune")]
        lines.insert(2, "finetune_checkpoints = soon")
        with pytest.raises(ConfigError, match="soon"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_non_synth_needs_data_dir(self, tmp_path):
        lines = [l if not l.startswith("dataset") else "dataset = idx" for l in BASE_LINES]
        with pytest.raises(ConfigError, match="data_dir"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_search_settings_checked(self, tmp_path):
        lines = [l if not l.startswith("epoch_budget") else "epoch_budget = 1" for l in BASE_LINES]
        with pytest.raises(ConfigError, match="epoch_budget"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_bad_image_size(self, tmp_path):
        lines = [l if not l.startswith("image_size") else "image_size = 8x8" for l in BASE_LINES]
        with pytest.raises(ConfigError, match="image_size"):
            ex.parse_experiment_config(write_config(tmp_path / "c.ini", lines))

    def test_synth_split_sizes_honored(self, tmp_path):
        cfg = ex.parse_experiment_config(write_config(tmp_path / "a.ini"))
        ds = ex.load_experiment_dataset(cfg)
        assert len(ds.train) == 32 and len(ds.val) == 16 and len(ds.test) == 16
        assert ds.image_shape == (8, 8, 1)


class TestRunArtifacts:
    def test_file_layout(self, finished):
        cfg, out, result = finished
        for arm in ("inherit", "baseline_i", "baseline_ii"):
            for rep in (0, 1):
                assert os.path.exists(os.path.join(out, arm, f"rep{rep}", "runlog.csv"))
            assert os.path.exists(os.path.join(out, "plots", f"best_fitness_{arm}.csv"))
            assert os.path.exists(os.path.join(out, "plots", f"block_count_{arm}.csv"))
        for name in ("runs.csv", "finetune.csv", "summary.csv"):
            assert os.path.exists(os.path.join(out, name))
        assert not result.failure_rows

    def test_runs_table(self, finished):
        cfg, out, result = finished
        rows = read_csv_rows(os.path.join(out, "runs.csv"))
        assert [(r["arm"], r["repetition"]) for r in rows] == [
            (arm.name, str(rep)) for arm in cfg.arms for rep in range(2)
        ]
        for row in rows:
            assert int(row["seed"]) == cfg.base_seed + int(row["repetition"])

    def test_runs_table_recomputes_from_run_logs(self, finished):
        cfg, out, result = finished
        for row in read_csv_rows(os.path.join(out, "runs.csv")):
            log = read_run_log(
                os.path.join(out, row["arm"], f"rep{row['repetition']}", "runlog.csv")
            )
            assert int(row["evaluations"]) == len(log)
            assert int(row["cumulative_epochs"]) == log[-1].cumulative_epochs
            assert float(row["total_flops"]) == sum(r.flops_estimate for r in log)
            accepted_best = max(r.child_fitness for r in log if r.accepted)
            assert float(row["best_val_fitness"]) == accepted_best

    def test_budget_and_overrun_bound(self, finished):
        cfg, out, _ = finished
        for arm in cfg.arms:
            for rep in range(2):
                log = read_run_log(os.path.join(out, arm.name, f"rep{rep}", "runlog.csv"))
                e, k = arm.epochs_per_eval, cfg.niche_depth
                assert cfg.epoch_budget <= log[-1].cumulative_epochs <= cfg.epoch_budget + k * e

    def test_checkpoint_files_and_resolution(self, finished):
        cfg, out, _ = finished
        run_dir = os.path.join(out, "inherit", "rep0")
        log = read_run_log(os.path.join(run_dir, "runlog.csv"))
        final = ex._resolve_checkpoint(run_dir, "final")
        assert final is not None and final[0] == log[-1].cumulative_epochs
        tag, _ = ex._resolve_checkpoint(run_dir, "3")
        assert tag >= 3
        assert ex._resolve_checkpoint(run_dir, "999999") is None
        assert ex._resolve_checkpoint(os.path.join(out, "nowhere"), "final") is None

    def test_finetune_table(self, finished):
        cfg, out, result = finished
        rows = read_csv_rows(os.path.join(out, "finetune.csv"))
        assert len(rows) == 3 * 2 * 2  # arms x reps x checkpoint labels
        assert {r["checkpoint"] for r in rows} == {"4", "final"}
        for row in rows:
            assert 0.0 <= float(row["test_accuracy"]) <= 1.0
            assert int(row["checkpoint_epochs"]) >= 4 or row["checkpoint"] == "final"

    def test_summary_recomputes_from_finetune_table(self, finished):
        cfg, out, _ = finished
        fine = read_csv_rows(os.path.join(out, "finetune.csv"))
        summary = read_csv_rows(os.path.join(out, "summary.csv"))
        assert len(summary) == 6  # 3 arms x 2 checkpoint labels
        for row in summary:
            values = np.array(
                [
                    float(r["test_accuracy"])
                    for r in fine
                    if r["arm"] == row["arm"] and r["checkpoint"] == row["checkpoint"]
                ]
            )
            assert int(row["n"]) == len(values) == 2
            assert float(row["min_test_accuracy"]) == values.min()
            assert float(row["max_test_accuracy"]) == values.max()
            assert float(row["mean_test_accuracy"]) == pytest.approx(values.mean(), rel=1e-12)
            assert float(row["std_test_accuracy"]) == pytest.approx(
                values.std(ddof=1), rel=1e-12
            )

    def test_plot_files_consistent_with_logs(self, finished):
        cfg, out, _ = finished
        for arm in cfg.arms:
            rows = read_csv_rows(os.path.join(out, "plots", f"best_fitness_{arm.name}.csv"))
            for row in rows:
                reps = [float(row["rep0"]), float(row["rep1"])]
                assert float(row["mean"]) == pytest.approx(np.mean(reps), rel=1e-12)
            for col in ("rep0", "rep1", "mean"):
                series = [float(r[col]) for r in rows]
                assert series == sorted(series)  # best-so-far never decreases
            blocks = read_csv_rows(os.path.join(out, "plots", f"block_count_{arm.name}.csv"))
            assert int(blocks[0]["cumulative_epochs"]) == 0
            assert float(blocks[0]["mean_block_count"]) == 1.0  # every run starts at one block

    def test_refuses_non_empty_out_dir(self, finished, tmp_path):
        cfg, out, _ = finished
        with pytest.raises(ConfigError, match="force"):
            ex.run_experiment(cfg, out)

    def test_unknown_arm_selection(self, finished, tmp_path):
        cfg, _, _ = finished
        with pytest.raises(ConfigError, match="nope"):
            ex.run_experiment(cfg, str(tmp_path / "o"), arm_names=["nope"])

    def test_arm_subset_runs_only_that_arm(self, finished, tmp_path):
        cfg, _, _ = finished
        out = str(tmp_path / "subset")
        result = ex.run_experiment(cfg, out, arm_names=["baseline_i"])
        assert {row["arm"] for row in result.run_rows} == {"baseline_i"}
        assert os.path.exists(os.path.join(out, "baseline_i", "rep0", "runlog.csv"))
        assert not os.path.exists(os.path.join(out, "inherit"))

    def test_seed_override(self, finished, tmp_path):
        cfg, _, _ = finished
        out = str(tmp_path / "seeded")
        result = ex.run_experiment(cfg, out, seed_override=500, arm_names=["baseline_i"])
        assert [row["seed"] for row in result.run_rows] == [500, 501]

    def test_single_job_rerun_is_byte_identical(self, finished, tmp_path):
        cfg, out, _ = finished
        again = str(tmp_path / "again")
        ex.run_experiment(cfg, again)
        for arm in cfg.arms:
            for rep in range(2):
                rel = os.path.join(arm.name, f"rep{rep}", "runlog.csv")
                with open(os.path.join(out, rel), "rb") as fh:
                    first = fh.read()
                with open(os.path.join(again, rel), "rb") as fh:
                    assert fh.read() == first

    def test_stats_report_test_accuracy(self, finished):
        cfg, out, _ = finished
        rows = ex.stats_report(out)
        assert len(rows) == 2 * 6  # 2 checkpoint labels x ordered arm pairs
        for row in rows:
            assert row["arm_a"] != row["arm_b"]
            assert row["n_a"] == row["n_b"] == 2
            assert 0.0 < row["p_value"] <= 1.0
        assert os.path.exists(os.path.join(out, "stats.csv"))

    def test_stats_report_val_fitness(self, finished):
        cfg, out, _ = finished
        rows = ex.stats_report(out, metric="best_val_fitness")
        assert len(rows) == 6
        assert {row["checkpoint"] for row in rows} == {"final"}

    def test_stats_report_unknown_metric(self, finished):
        cfg, out, _ = finished
        with pytest.raises(ConfigError, match="metric"):
            ex.stats_report(out, metric="loss")

    def test_stats_report_before_running(self, tmp_path):
        with pytest.raises(ConfigError, match="finetune.csv"):
            ex.stats_report(str(tmp_path))


class TestFailurePolicy:
    def test_partial_failure_is_recorded_and_skipped(self, tmp_path, monkeypatch):
        cfg = ex.parse_experiment_config(write_config(tmp_path / "a.ini"))
        real_run_ea = ex.run_ea

        def flaky(ea_cfg, dataset, checkpoint_dir=None):
            if ea_cfg.inheritance and ea_cfg.seed == cfg.base_seed + 1:
                raise SearchExhausted("forced failure for the harness test")
            return real_run_ea(ea_cfg, dataset, checkpoint_dir=checkpoint_dir)

        monkeypatch.setattr(ex, "run_ea", flaky)
        out = str(tmp_path / "out")
        result = ex.run_experiment(cfg, out)
        assert len(result.run_rows) == 5
        run_failures = [r for r in result.failure_rows if r["stage"] == "run"]
        assert run_failures == [
            {
                "arm": "inherit",
                "repetition": 1,
                "stage": "run",
                "error": "forced failure for the harness test",
            }
        ]
        failures = read_csv_rows(os.path.join(out, "failures.csv"))
        assert failures[0]["arm"] == "inherit" and failures[0]["repetition"] == "1"
        summary = read_csv_rows(os.path.join(out, "summary.csv"))
        inherit_rows = [r for r in summary if r["arm"] == "inherit"]
        assert all(int(r["n"]) == 1 for r in inherit_rows)

    def test_whole_arm_failure_raises(self, tmp_path, monkeypatch):
        cfg = ex.parse_experiment_config(write_config(tmp_path / "a.ini"))

        def always_fails(ea_cfg, dataset, checkpoint_dir=None):
            raise SearchExhausted("forced failure for the harness test")

        monkeypatch.setattr(ex, "run_ea", always_fails)
        out = str(tmp_path / "out")
        with pytest.raises(RunFailure, match="inherit"):
            ex.run_experiment(cfg, out)
        failures = read_csv_rows(os.path.join(out, "failures.csv"))
        assert len(failures) == 6


def rec(i, cum, fit, accepted, blocks, depth=None, parent=None, kind="add_block"):
    return RunRecord(
        eval_index=i,
        cumulative_epochs=cum,
        mutation_kind="initial" if i == 0 else kind,
        niche_depth=depth,
        parent_fitness=parent,
        child_fitness=fit,
        accepted=accepted,
        block_count=blocks,
        flops_estimate=100.0,
        genome_digest=f"{i:064x}",
    )


class TestPlotDataDirect:
    def test_single_run_mean_is_that_run(self, tmp_path):
        records = [
            rec(0, 2, 0.3, True, 1),
            rec(1, 4, 0.5, True, 2, parent=0.3),
            rec(2, 6, 0.4, False, 3, parent=0.5),
        ]
        ex.emit_plot_data({"solo": [records]}, str(tmp_path))
        rows = read_csv_rows(os.path.join(tmp_path, "plots", "best_fitness_solo.csv"))
        assert [r["cumulative_epochs"] for r in rows] == ["2", "4", "6"]
        for row in rows:
            assert row["mean"] == row["rep0"]
        assert [float(r["mean"]) for r in rows] == [0.3, 0.5, 0.5]

    def test_block_count_tracks_the_incumbent(self, tmp_path):
        records = [
            rec(0, 2, 0.3, True, 1),
            rec(1, 4, 0.5, True, 2, parent=0.3),
            rec(2, 6, 0.4, False, 3, parent=0.5),
        ]
        ex.emit_plot_data({"solo": [records]}, str(tmp_path))
        rows = read_csv_rows(os.path.join(tmp_path, "plots", "block_count_solo.csv"))
        assert [(r["cumulative_epochs"], float(r["mean_block_count"])) for r in rows] == [
            ("0", 1.0),
            ("2", 1.0),
            ("4", 2.0),
        ]

    def test_winning_niche_moves_the_incumbent(self):
        records = [
            rec(0, 2, 0.5, True, 1),
            rec(1, 4, 0.4, False, 2, parent=0.5),
            rec(2, 6, 0.45, True, 3, depth=1, parent=0.4),
            rec(3, 8, 0.6, True, 4, depth=2, parent=0.45),
        ]
        assert ex._incumbent_blocks(records) == [(0, 1), (2, 1), (8, 4)]

    def test_losing_niche_leaves_the_incumbent(self):
        records = [
            rec(0, 2, 0.5, True, 1),
            rec(1, 4, 0.4, False, 2, parent=0.5),
            rec(2, 6, 0.3, False, 3, depth=1, parent=0.4),
            rec(3, 8, 0.2, False, 4, depth=2, parent=0.4),
        ]
        assert ex._incumbent_blocks(records) == [(0, 1), (2, 1)]

    def test_step_interpolation_onto_union_grid(self, tmp_path):
        run_a = [rec(0, 2, 0.1, True, 1), rec(1, 4, 0.3, True, 1, parent=0.1)]
        run_b = [rec(0, 3, 0.2, True, 1), rec(1, 6, 0.4, True, 1, parent=0.2)]
        ex.emit_plot_data({"pair": [run_a, run_b]}, str(tmp_path))
        rows = read_csv_rows(os.path.join(tmp_path, "plots", "best_fitness_pair.csv"))
        table = {r["cumulative_epochs"]: float(r["mean"]) for r in rows}
        assert table == {
            "2": pytest.approx(0.15),
            "3": pytest.approx(0.15),
            "4": pytest.approx(0.25),
            "6": pytest.approx(0.35),
        }

    def test_best_so_far_is_a_running_maximum(self):
        records = [
            rec(0, 2, 0.9, True, 1),
            rec(1, 4, 0.1, False, 2, parent=0.9),
            rec(2, 6, 0.2, False, 2, parent=0.9),
        ]
        assert ex._best_so_far(records) == [(2, 0.9), (4, 0.9), (6, 0.9)]


class TestCli:
    def test_validate_config_ok(self, tmp_path, capsys):
        path = write_config(tmp_path / "a.ini")
        assert cli.main(["validate-config", "--config", path]) == 0
        assert "OK" in capsys.readouterr().out

    def test_validate_config_bad(self, tmp_path, capsys):
        lines = ["[experiment]", "schema_version = 1"]
        path = write_config(tmp_path / "bad.ini", lines)
        assert cli.main(["validate-config", "--config", path]) == 1
        assert "config error" in capsys.readouterr().err

    def test_usage_error(self):
        assert cli.main(["run"]) == 1  # missing required flags
        assert cli.main(["frobnicate"]) == 1

    def test_help_exits_zero(self):
        assert cli.main(["--help"]) == 0

    def test_run_then_stats_and_plotdata(self, tmp_path, capsys):
        head = BASE_LINES[: BASE_LINES.index("[arm baseline_ii]") - 1]
        lines = [
            "finetune_checkpoints = final" if l.startswith("finetune") else l for l in head
        ]
        path = write_config(tmp_path / "a.ini", lines)
        out = str(tmp_path / "out")
        assert cli.main(["run", "--config", path, "--out", out]) == 0
        assert "completed 4 runs" in capsys.readouterr().out
        assert cli.main(["run", "--config", path, "--out", out]) == 1  # non-empty
        capsys.readouterr()
        assert cli.main(["run", "--config", path, "--out", out, "--force"]) == 0
        capsys.readouterr()
        assert cli.main(["stats", "--out", out]) == 0
        assert "p=" in capsys.readouterr().out
        shutil.rmtree(os.path.join(out, "plots"))
        assert cli.main(["plotdata", "--out", out]) == 0
        assert os.path.exists(os.path.join(out, "plots", "best_fitness_inherit.csv"))
        assert cli.main(["finetune", "--config", path, "--out", out]) == 0

    def test_data_error_exit_code(self, tmp_path, capsys):
        lines = []
        for l in BASE_LINES:
            if l.startswith("dataset"):
                lines.extend(["dataset = idx", f"data_dir = {tmp_path / 'empty'}"])
            else:
                lines.append(l)
        os.makedirs(tmp_path / "empty")
        path = write_config(tmp_path / "a.ini", lines)
        assert cli.main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 2
        assert "data error" in capsys.readouterr().err

    def test_run_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        def always_fails(ea_cfg, dataset, checkpoint_dir=None):
            raise SearchExhausted("forced failure for the harness test")

        monkeypatch.setattr(ex, "run_ea", always_fails)
        path = write_config(tmp_path / "a.ini")
        assert cli.main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 3
        assert "run failure" in capsys.readouterr().err

    def test_plotdata_without_logs(self, tmp_path, capsys):
        assert cli.main(["plotdata", "--out", str(tmp_path)]) == 1

    def test_console_script_entry(self, tmp_path):
        path = write_config(tmp_path / "a.ini")
        proc = subprocess.run(
            [sys.executable, "-m", "convevo.cli", "validate-config", "--config", path],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "OK" in proc.stdout
