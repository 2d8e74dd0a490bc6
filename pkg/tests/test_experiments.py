import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ris_control import cli
from ris_control.config import (ConfigError, ExperimentConfig, dump_config, from_dict, load_config, full_scale,
                                validate)
from ris_control.experiments import (ARR_COLUMNS, SUMMARY_COLUMNS, hash_bytes, load_arr, make_scene, read_csv,
                                     run_config, summarize, write_csv)
from ris_control.plots import CHART_COLUMNS, ChartSchemaError, emit_outputs, plot_arr

TINY = {
    "schema_version": 1,
    "seeds": [0, 1],
    "scene": {"num_ris": 2, "elements": 4},
    "users": {"num_interferers": 2},
    "predictor": {"epochs": 2, "hidden": 8},
    "policy": {"env_steps": 64, "width": 8, "critic_hidden": 8},
    "evaluation": {"episodes": 1, "intervals": 2, "policies": ["tpgc", "always_on", "all_off", "tpc"]},
    "sweep": {"axes": ["power", "elements", "ablation"], "powers": [0.5, 1.0, 2.0], "elements": [2, 4],
              "interferer_counts": [1, 2], "arr_snapshots": 4, "T_list": [2, 4],
              "ablation_env_steps": 48, "ablation_eval_snapshots": 4},
}


def leaf_paths(d, prefix=()):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from leaf_paths(v, prefix + (k,))
        else:
            yield prefix + (k,)


def set_path(d, path, value):
    for k in path[:-1]:
        d = d[k]
    d[path[-1]] = value


def get_path(d, path):
    for k in path:
        d = d[k]
    return d


def perturb(value):
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value + 1
    if isinstance(value, float):
        return value * 1.5 + 0.25
    if isinstance(value, str):
        return value + "x"
    if isinstance(value, list):
        return value + value[:1] if value else [1]
    return 1  # None fields


# --- config ------------------------------------------------------------------------------

def test_defaults_validate_and_match_desk_scale():
    cfg = validate(ExperimentConfig())
    assert (cfg.scene.elements, cfg.scene.num_ris, cfg.users.num_interferers, cfg.policy.T) == (16, 2, 3, 4)
    assert cfg.sweep.powers == [0.25, 0.5, 1.0, 2.0]
    assert len(cfg.seeds) >= 5


def test_full_scale_preset():
    cfg = validate(full_scale())
    assert (cfg.scene.elements, cfg.scene.num_ris, cfg.users.num_interferers) == (600, 10, 10)
    assert cfg.scene.tx_power == 1.0 and cfg.scene.noise_power == 1e-12


def test_empty_sweep_axes_rejected():
    with pytest.raises(ConfigError, match="sweep.axes"):
        from_dict({"sweep": {"axes": []}})


def test_every_problem_is_listed():
    with pytest.raises(ConfigError) as err:
        from_dict({"seeds": [], "scene": {"elements": 0}, "evaluation": {"policies": ["nope"]}})
    text = str(err.value)
    for field in ("seeds", "scene.elements", "evaluation.policies"):
        assert field in text
    assert len(err.value.problems) == 3


@pytest.mark.parametrize("data, field", [
    ({"scene": {"elemnts": 4}}, "scene.elemnts"),
    ({"bogus": 1}, "bogus"),
    ({"scene": {"elements": "many"}}, "scene.elements"),
    ({"schema_version": 2}, "schema_version"),
    ({"policy": {"quantize_bits": 12}}, "policy.quantize_bits"),
])
def test_bad_fields_are_named(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        from_dict(data)


def test_yaml_round_trip(tmp_path):
    cfg = from_dict(TINY)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again == cfg and again.config_hash() == cfg.config_hash()


def test_yaml_exponent_strings_become_floats(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("schema_version: 1\nscene:\n  noise_power: 1e-12\n")
    assert load_config(path).scene.noise_power == 1e-12


def test_empty_file_is_default(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    assert load_config(path) == ExperimentConfig()


@settings(max_examples=100)
@given(st.data())
def test_hash_changes_iff_a_field_changes(data):
    base = ExperimentConfig().to_dict()
    path = data.draw(st.sampled_from(sorted(leaf_paths(base))))
    changed = json.loads(json.dumps(base))
    set_path(changed, path, perturb(get_path(base, path)))
    same = json.loads(json.dumps(base))
    set_path(same, path, get_path(base, path))
    from ris_control.config import hash_mapping
    assert hash_mapping(changed) != hash_mapping(base)
    assert hash_mapping(same) == hash_mapping(base)


def test_make_scene_uses_config_constants():
    cfg = from_dict({"scene": {"num_ris": 3, "elements": 5, "tx_power": 0.5, "carrier_hz": 2.8e9}})
    s = make_scene(cfg, tx_power=2.0)
    assert s.num_ris == 3 and s.elements_per_ris == 5 and s.tx_power == 2.0
    assert s.wavelength == pytest.approx(299_792_458.0 / 2.8e9)


# --- CSV ---------------------------------------------------------------------------------

def test_csv_round_trip_and_hash_line(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, "abc", ("a", "b"), [(1, 0.1), (2, np.float64(1 / 3))])
    lines = p.read_text().splitlines()
    assert lines[0] == "# config_hash=abc" and lines[1] == "a,b"
    h, rows = read_csv(p)
    assert h == "abc" and float(rows[1]["b"]) == 1 / 3


def test_csv_rejects_ragged_rows_and_missing_hash(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "x.csv", "h", ("a", "b"), [(1,)])
    (tmp_path / "y.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(tmp_path / "y.csv")
    with pytest.raises(FileNotFoundError):
        read_csv(tmp_path / "missing.csv")


def test_summary_groups_by_axis_value_mode():
    cols = ("axis", "value", "baseline_mode", "realized_ar", "realized_sinr")
    rows = [("power", 1.0, "a", 1.0, 3.0), ("power", 1.0, "a", 3.0, 5.0), ("power", 2.0, "a", 4.0, 1.0)]
    out = summarize(rows, cols, "ar")
    assert out[0] == ("power", 1.0, "a", "ar", 2.0, 1.0, 2)
    assert summarize(rows, cols, "sinr")[0][4] == 4.0


# --- end-to-end on a tiny config ----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = from_dict(TINY)
    out = tmp_path_factory.mktemp("run")
    run_config(cfg, out)
    return cfg, out


def test_run_writes_expected_outputs(tiny_run):
    cfg, out = tiny_run
    names = {p.name for p in out.glob("*.csv")}
    assert {"reward_curve.csv", "decisions_eval.csv", "eval_summary.csv", "decisions_power.csv",
            "sweep_power.csv", "decisions_elements.csv", "sweep_elements.csv", "ablation.csv",
            "ablation_log.csv", "arr.csv", "arr_log.csv"} <= names
    h = cfg.config_hash()
    for p in out.glob("*.csv"):
        assert read_csv(p)[0] == h
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == h and manifest["seeds"] == [0, 1]
    for name, digest in manifest["outputs"].items():
        assert hash_bytes((out / name).read_bytes()) == digest


def test_rerun_from_cached_models_is_byte_identical(tiny_run, tmp_path):
    cfg, out = tiny_run
    shutil.copytree(out / "models", tmp_path / "models")
    run_config(cfg, tmp_path)
    for p in out.glob("*.csv"):
        assert (tmp_path / p.name).read_bytes() == p.read_bytes(), p.name


def test_summaries_recompute_from_decision_logs(tiny_run):
    cfg, out = tiny_run
    for dec, summ in (("decisions_power.csv", "sweep_power.csv"), ("decisions_eval.csv", "eval_summary.csv")):
        _, rows = read_csv(out / dec)
        _, table = read_csv(out / summ)
        for s in table:
            vals = [float(r["realized_ar"]) for r in rows
                    if r["value"] == s["value"] and r["baseline_mode"] == s["baseline_mode"]]
            assert len(vals) == int(s["n"])
            assert float(s["mean"]) == pytest.approx(np.mean(vals), rel=1e-12)


def test_all_off_sinr_is_flat_across_elements(tiny_run):
    _, out = tiny_run
    _, rows = read_csv(out / "decisions_elements.csv")
    off = {}
    for r in rows:
        if r["baseline_mode"] == "all_off":
            off.setdefault((r["seed"], r["episode"], r["interval"]), set()).add(r["realized_sinr"])
    assert off and all(len(v) == 1 for v in off.values())


def test_all_off_sinr_increases_with_power(tiny_run):
    _, out = tiny_run
    _, rows = read_csv(out / "decisions_power.csv")
    by_key = {}
    for r in rows:
        if r["baseline_mode"] == "all_off":
            by_key.setdefault((r["seed"], r["episode"], r["interval"]), []).append(
                (float(r["value"]), float(r["realized_sinr"])))
    for series in by_key.values():
        series.sort()
        assert all(b[1] > a[1] for a, b in zip(series, series[1:]))


def test_arr_table_is_consistent(tiny_run):
    _, out = tiny_run
    tr, te, mat = load_arr(out / "arr.csv")
    assert tr == te == [1, 2]
    assert np.all(mat > 0)
    _, rows = read_csv(out / "arr.csv")
    assert tuple(rows[0]) == ARR_COLUMNS
    for r in rows:
        assert float(r["arr"]) == pytest.approx(float(r["ar_test"]) / float(r["ar_train"]), rel=1e-12)


# --- charts ------------------------------------------------------------------------------------

def test_charts_are_pure(tiny_run, tmp_path):
    _, out = tiny_run
    for p in out.glob("*.csv"):
        shutil.copy(p, tmp_path / p.name)
    first = {p.name: p.read_bytes() for p in emit_outputs(tmp_path)}
    second = {p.name: p.read_bytes() for p in emit_outputs(tmp_path)}
    assert first == second
    assert {"reward_curve.png", "sweep_power.png", "sweep_elements.png", "arr.png", "ablation.png"} <= set(first)


def test_chart_columns_exist_in_csvs(tiny_run):
    _, out = tiny_run
    sources = {"reward_curve": "reward_curve.csv", "sweep": "sweep_power.csv", "arr": "arr.csv",
               "ablation": "ablation.csv"}
    for kind, name in sources.items():
        _, rows = read_csv(out / name)
        assert set(CHART_COLUMNS[kind]) <= set(rows[0])


def test_heatmap_cell_count(tiny_run, tmp_path):
    _, out = tiny_run
    _, cells = plot_arr(out / "arr.csv", tmp_path / "arr.png")
    assert cells == load_arr(out / "arr.csv")[2].size


def test_chart_schema_and_missing_csv_errors(tmp_path):
    write_csv(tmp_path / "arr.csv", "h", ("m_train", "m_test"), [(1, 1)])
    with pytest.raises(ChartSchemaError, match="arr"):
        plot_arr(tmp_path / "arr.csv", tmp_path / "arr.png")
    with pytest.raises(FileNotFoundError):
        emit_outputs(tmp_path / "empty")


# --- CLI ---------------------------------------------------------------------------------------

def test_cli_seed_and_out_override(tmp_path):
    args = cli.build_parser().parse_args(["eval", "--seed", "7", "--out", str(tmp_path)])
    cfg = cli.resolve_config(args)
    assert cfg.train_seed == 7 and cfg.seeds == [7, 8, 9, 10, 11]
    assert cfg.out_dir == str(tmp_path)


@pytest.mark.parametrize("cmd", ["train", "eval", "sweep", "arr", "render"])
def test_cli_subcommands_parse(cmd):
    args = cli.build_parser().parse_args([cmd, "--config", "x.yaml"])
    assert args.command == cmd and args.config == Path("x.yaml")


def test_cli_rejects_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("schema_version: 1\nsweep:\n  axes: []\n")
    assert cli.main(["eval", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "sweep.axes" in capsys.readouterr().err


def test_cli_render(tiny_run, tmp_path, capsys):
    _, out = tiny_run
    shutil.copy(out / "arr.csv", tmp_path / "arr.csv")
    assert cli.main(["render", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "arr.png").exists()
    assert "arr.png" in capsys.readouterr().out


def test_summary_columns():
    assert SUMMARY_COLUMNS == ("axis", "value", "baseline_mode", "metric", "mean", "std", "n")
