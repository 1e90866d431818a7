import csv
import hashlib
import json

import numpy as np
import pytest
from conftest import small_params

from chutemap import cli
from chutemap.floorplan import generate_map, load_map, save_map
from chutemap.optimizer import archive_cell, init_min_dist
from chutemap.taskmap import TaskMapping, load_mapping, load_profile, make_profile, measures, save_mapping, save_profile


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def small_files(tmp_path):
    fp = generate_map(small_params())
    p = make_profile(5)
    save_map(fp, tmp_path / "map.txt")
    save_profile(p, tmp_path / "profile.json")
    save_mapping(init_min_dist(fp, p), tmp_path / "mapping.txt")
    return tmp_path


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


class TestGenMap:
    @pytest.mark.parametrize("preset, m, n", [("setup1", 253, 99), ("setup4", 325, 138)])
    def test_presets(self, tmp_path, preset, m, n):
        assert run_cli("gen-map", "--preset", preset, "--out", tmp_path) == 0
        fp = load_map(tmp_path / "map.txt")
        assert abs(fp.n_chutes - m) <= 0.1 * m
        assert load_profile(tmp_path / "profile.json").n_dest == n
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["outputs"]["map.txt"] == digest(tmp_path / "map.txt")

    def test_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert run_cli("gen-map", "--width", 30, "--height", 20, "--chutes", 20, "--seed", 4,
                           "--out", tmp_path / d) == 0
        assert digest(tmp_path / "a" / "map.txt") == digest(tmp_path / "b" / "map.txt")

    def test_random_removal_needs_seed(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_cli("gen-map", "--width", 30, "--height", 20, "--chutes", 20, "--out", tmp_path)
        assert exc.value.code == cli.EXIT_USAGE

    def test_config_precedence(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"preset": "setup2", "margin": 3, "n_dest": 30}))
        assert run_cli("gen-map", "--config", cfg, "--n-dest", 12, "--out", tmp_path / "o") == 0
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["config"]["params"]["margin"] == 3  # config file beats preset
        assert manifest["config"]["params"]["corridor"] == 2  # preset fills the rest
        assert manifest["config"]["n_dest"] == 12  # flag beats config file

    def test_infeasible_layout(self, tmp_path):
        assert run_cli("gen-map", "--width", 8, "--height", 8, "--out", tmp_path) == cli.EXIT_VALIDATION


class TestEvaluate:
    def base(self, d):
        return ["evaluate", "--map", d / "map.txt", "--profile", d / "profile.json", "--mapping", d / "mapping.txt",
                "--horizon", 100]

    def test_replicates_and_sweep(self, small_files):
        d = small_files
        out = d / "ev"
        assert run_cli(*self.base(d), "--robots", "5,10", "--replicates", 3, "--seed", 1, "--out", out) == 0
        doc = json.loads((out / "result.json").read_text())
        assert [r["robots"] for r in doc["summary"]] == [5, 10]
        assert all(r["throughput_se"] >= 0 for r in doc["summary"])
        assert len(doc["runs"]) == 6
        rows = list(csv.DictReader((out / "result.csv").open()))
        assert [int(r["robots"]) for r in rows] == [5, 10]
        thr = [r["throughput"] for r in doc["runs"] if r["robots"] == 5]
        se = np.std(thr, ddof=1) / np.sqrt(3)
        assert doc["summary"][0]["throughput_se"] == pytest.approx(se)

    def test_single_replicate_zero_se(self, small_files):
        out = small_files / "ev1"
        assert run_cli(*self.base(small_files), "--robots", 5, "--replicates", 1, "--seed", 1, "--out", out) == 0
        row = json.loads((out / "result.json").read_text())["summary"][0]
        assert row["throughput_se"] == 0.0 and row["recirculation_se"] == 0.0

    def test_byte_identical(self, small_files):
        for name in ("r1", "r2"):
            run_cli(*self.base(small_files), "--robots", 8, "--replicates", 2, "--seed", 3, "--out",
                    small_files / name)
        for f in ("result.json", "result.csv"):
            assert digest(small_files / "r1" / f) == digest(small_files / "r2" / f)

    def test_seed_required(self, small_files):
        with pytest.raises(SystemExit) as exc:
            run_cli(*self.base(small_files), "--out", small_files / "x")
        assert exc.value.code == cli.EXIT_USAGE

    def test_invalid_mapping_needs_opt_in(self, small_files):
        fp = load_map(small_files / "map.txt")
        save_mapping(TaskMapping(np.zeros(fp.n_chutes, dtype=int), 5), small_files / "mapping.txt")
        args = [*self.base(small_files), "--robots", 5, "--replicates", 1, "--seed", 0]
        assert run_cli(*args, "--out", small_files / "bad") == cli.EXIT_VALIDATION
        assert not (small_files / "bad" / "result.json").exists()
        assert run_cli(*args, "--repair", "--out", small_files / "fixed") == 0
        doc = json.loads((small_files / "fixed" / "result.json").read_text())
        assert doc["repaired_chutes"] > 0
        assert (small_files / "fixed" / "repaired_mapping.txt").exists()

    def test_parse_error(self, small_files):
        (small_files / "map.txt").write_text("not a map\n")
        args = [*self.base(small_files), "--seed", 0, "--out", small_files / "x"]
        assert run_cli(*args) == cli.EXIT_PARSE

    def test_missing_file(self, small_files):
        args = [*self.base(small_files), "--seed", 0, "--out", small_files / "x"]
        args[2] = small_files / "nope.txt"
        assert run_cli(*args) == cli.EXIT_PARSE

    def test_too_many_robots(self, small_files):
        args = [*self.base(small_files), "--robots", 100000, "--seed", 0, "--out", small_files / "x"]
        assert run_cli(*args) == cli.EXIT_VALIDATION


class TestOptimize:
    def test_baseline(self, small_files):
        out = small_files / "b"
        assert run_cli("optimize", "--map", small_files / "map.txt", "--n-dest", 5, "--baseline", "cluster",
                       "--out", out) == 0
        m = load_mapping(out / "mapping.txt")
        assert m.n_dest == 5

    def test_small_run(self, small_files):
        out = small_files / "o"
        code = run_cli("optimize", "--map", small_files / "map.txt", "--profile", small_files / "profile.json",
                       "--n-eval", 16, "--lambda", 8, "--n-e", 1, "--robots", 10, "--n-t", 80, "--seed", 2,
                       "--workers", 1, "--no-greedy-init", "--out", out)
        assert code == 0
        doc = json.loads((out / "result.json").read_text())
        assert doc["n_evals"] == 16
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["ea"]["use_greedy_init"] is False
        assert manifest["config"]["ea"]["lam"] == 8
        assert set(manifest["outputs"]) == {"mapping.txt", "result.json", "history.csv"}

    def test_paper_scale_flags_parse(self):
        args = cli.build_parser().parse_args(
            ["optimize", "--map", "m", "--n-dest", "5", "--n-eval", "10000", "--lambda", "100", "--n-e", "5",
             "--n-t", "5000", "--seed", "0", "--out", "o"])
        cfg = cli._ea_config(cli.Settings(args), 0)
        assert (cfg.n_eval, cfg.lam, cfg.n_e, cfg.sim.horizon) == (10_000, 100, 5, 5000)

    def test_budget_error(self, small_files):
        with pytest.raises(SystemExit) as exc:
            run_cli("optimize", "--map", small_files / "map.txt", "--n-dest", 5, "--n-eval", 4, "--lambda", 8,
                    "--seed", 0, "--out", small_files / "x")
        assert exc.value.code == cli.EXIT_USAGE


class TestQD:
    def test_archive_rows_rebin(self, small_files):
        out = small_files / "qd"
        code = run_cli("qd", "--map", small_files / "map.txt", "--profile", small_files / "profile.json",
                       "--n-eval", 24, "--lambda", 8, "--n-e", 1, "--robots", 10, "--n-t", 80, "--seed", 1,
                       "--workers", 1, "--resolution", "10x10", "--out", out)
        assert code == 0
        fp = load_map(small_files / "map.txt")
        p = load_profile(small_files / "profile.json")
        doc = json.loads((out / "archive.json").read_text())
        rows = list(csv.DictReader((out / "archive.csv").open()))
        assert 0 < len(rows) <= 100
        for row in rows:
            m = load_mapping(out / row["mapping"])
            cell = archive_cell(measures(m, p, fp), doc["bounds"], doc["resolution"])
            assert cell == (int(row["cell_x"]), int(row["cell_y"]))

    def test_bad_resolution(self, small_files):
        with pytest.raises(SystemExit):
            run_cli("qd", "--map", small_files / "map.txt", "--n-dest", 5, "--seed", 0, "--resolution", "ten",
                    "--out", small_files / "x")


class TestRepairCommand:
    def test_repairs(self, small_files):
        fp = load_map(small_files / "map.txt")
        save_mapping(TaskMapping(np.zeros(fp.n_chutes, dtype=int), 5), small_files / "bad.txt")
        out = small_files / "r"
        assert run_cli("repair", "--map", small_files / "map.txt", "--mapping", small_files / "bad.txt",
                       "--profile", small_files / "profile.json", "--out", out) == 0
        doc = json.loads((out / "result.json").read_text())
        assert doc["changed_chutes"] == 5  # one chute each for destinations 1..4 and recirculation
        assert load_mapping(out / "mapping.txt").counts().min() >= 1

    def test_infeasible(self, small_files):
        code = run_cli("repair", "--map", small_files / "map.txt", "--mapping", small_files / "mapping.txt",
                       "--profile", small_files / "profile.json", "--delta", 0.1, "--out", small_files / "x")
        assert code == cli.EXIT_INFEASIBLE

    def test_shape_mismatch(self, small_files):
        save_mapping(TaskMapping([0, 1, 2], 2), small_files / "tiny.txt")
        code = run_cli("repair", "--map", small_files / "map.txt", "--mapping", small_files / "tiny.txt",
                       "--n-dest", 2, "--out", small_files / "x")
        assert code == cli.EXIT_VALIDATION


def test_runtime_error_code(small_files, monkeypatch):
    def boom(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "cmd_repair", boom)
    parser_args = ["repair", "--map", small_files / "map.txt", "--mapping", small_files / "mapping.txt",
                   "--n-dest", 5, "--out", small_files / "x"]
    # set_defaults captured the original function, so patch through the parser
    real_build = cli.build_parser

    def patched():
        p = real_build()
        p._subparsers._group_actions[0].choices["repair"].set_defaults(func=boom)
        return p

    monkeypatch.setattr(cli, "build_parser", patched)
    assert run_cli(*parser_args) == cli.EXIT_RUNTIME


def test_verbose_flag_after_command(small_files):
    assert run_cli("optimize", "--map", small_files / "map.txt", "--n-dest", 5, "--baseline", "min-dist",
                   "--out", small_files / "v", "-v") == 0
