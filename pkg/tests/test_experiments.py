import json

import jsonschema
import pytest

from npuvsim import cli
from npuvsim import experiments as ex
from npuvsim.errors import ConfigError, UnknownParameter

BUNDLED = ex.bundled_scenarios()


def load(name):
    return ex.Scenario.load(BUNDLED[name])


def test_schema_is_valid_draft():
    jsonschema.Draft202012Validator.check_schema(ex.schema())


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_bundled_scenarios_validate(name):
    sc = load(name)
    assert sc.name == name
    sc.config()


def test_malformed_json_reports_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "name": "x",\n  "seed": 1,,\n}\n')
    with pytest.raises(ConfigError, match=r"bad\.json:3:\d+"):
        ex.Scenario.load(p)


def test_missing_file():
    with pytest.raises(ConfigError):
        ex.Scenario.load("/nonexistent/scenario.json")


@pytest.mark.parametrize("doc, where", [
    ({"name": "x"}, "<root>"),
    ({"name": "x", "seed": 1, "colour": "red"}, "<root>"),
    ({"name": "x", "seed": 1, "vnpus": [{"vmid": 1, "mode": "fast"}]}, "vnpus/0/mode"),
    ({"name": "x", "seed": -1}, "seed"),
])
def test_schema_errors_name_the_field(doc, where):
    with pytest.raises(ConfigError, match=where):
        ex.Scenario.from_dict(doc)


def test_bad_chip_field():
    sc = ex.Scenario.from_dict({"name": "x", "seed": 1, "chip": {"widht": 4}})
    with pytest.raises(ConfigError):
        sc.config()


def test_vm_line_context():
    sc = load("mig_vs_vnpu")
    line = sc.line_of_vm(2)
    assert '"vmid": 2' in sc.text.splitlines()[line - 1]
    assert sc.context(2).endswith(f":{line}: vnpu 2")


def test_lockin_scenario():
    notes = ex.run(load("lockin")).notes
    assert notes["exact"]["failed"] == {"2": "TopologyLockIn"}
    assert notes["exact"]["idle_cores"] == 16
    assert notes["similar"]["failed"] == {}
    assert notes["similar"]["allocated_cores"] == 18


def test_compare_needs_two_modes():
    with pytest.raises(ConfigError):
        ex.compare(["vnpu"], load("resnet18"))
    with pytest.raises(ConfigError):
        ex.compare(["vnpu", "warp"], load("resnet18"))


def test_compare_table():
    sc = load("resnet18").replace(iterations=2)
    out = ex.compare(["vnpu", "bare"], sc)
    first = [r for r in out["rows"] if r["mode"] == "vnpu" and r["vm"] == 1][0]
    assert first["normalized"] == 1.0
    assert set(out["runs"]) == {"vnpu", "bare"}


def test_sweep_unknown_parameter():
    with pytest.raises(UnknownParameter):
        ex.sweep("voltage", [1], load("vrouter"))


def test_sweep_empty_values():
    assert ex.sweep("packets", [], load("vrouter")) == []


def test_sweep_packets_rows():
    rows = ex.sweep("packets", [2, 30], load("vrouter"))
    overheads = [v for label, vm, k, v in rows if k == "overhead"]
    assert len(overheads) == 2 and overheads[0] > overheads[1]


def test_sweep_tlb_entries_page_monotone():
    sc = load("translation").replace(params={"iterations": 3, "chunk_bytes": 65536,
                                             "workloads": [{"workload": "resnet18", "cores": 6}]})
    rows = ex.sweep("tlb_entries", [1, 4, 16, 64], sc)
    page = [v for _l, _vm, k, v in rows if k == "page_stall"]
    assert len(page) == 4
    assert all(a >= b for a, b in zip(page, page[1:]))


def test_apply_parameter_cores_and_strategy():
    sc = load("mapping_28")
    assert ex.apply_parameter(sc, "cores", 11).vnpus[0]["cores"] == 11
    assert ex.apply_parameter(sc, "strategy", "zigzag").vnpus[0]["strategy"] == "zigzag"


def test_translation_needs_three_iterations():
    cfg = load("translation").config()
    with pytest.raises(ConfigError):
        ex.translation_study(cfg, "resnet18", 2, iterations=2)


# ---------------------------------------------------------------------------
# CLI

def test_cli_validate(capsys):
    assert cli.main(["validate", "--scenario", "lockin"]) == 0
    assert "ok" in capsys.readouterr().out


def test_cli_validate_bad(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{")
    assert cli.main(["validate", "--scenario", str(p)]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_unknown_scenario(capsys):
    assert cli.main(["run", "--scenario", "no-such-thing"]) == 2


def test_cli_run_writes_files(tmp_path, monkeypatch):
    monkeypatch.delenv("NPUVSIM_LOG", raising=False)
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", "vrouter", "--out", str(out)]) == 0
    data = json.loads((out / "metrics.json").read_text())
    assert data["metrics_version"] == 1
    assert (out / "metrics.csv").read_text().startswith("scenario,vm,metric,value")
    assert not (out / "trace.txt").exists()


def test_cli_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["run", "--scenario", "broadcast", "--out", str(d), "--seed", "7"]) == 0
    for f in ("metrics.json", "metrics.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_cli_trace(tmp_path, monkeypatch):
    monkeypatch.setenv("NPUVSIM_LOG", "trace")
    sc = load("resnet18").replace(iterations=1)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc.to_dict()))
    assert cli.main(["run", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "trace.txt").stat().st_size > 0


def test_cli_run_stdout(capsys):
    assert cli.main(["run", "--scenario", "vrouter"]) == 0
    assert json.loads(capsys.readouterr().out)["notes"]["vrouter"]


def test_cli_compare(tmp_path, capsys):
    sc = load("resnet18").replace(iterations=1)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(sc.to_dict()))
    assert cli.main(["compare", "--scenario", str(p), "--mode", "vnpu", "--mode", "bare",
                     "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "compare.json").read_text())["modes"] == ["vnpu", "bare"]


def test_cli_compare_single_mode_fails(capsys):
    assert cli.main(["compare", "--scenario", "resnet18", "--mode", "vnpu"]) == 2


def test_cli_sweep(capsys):
    assert cli.main(["sweep", "--scenario", "vrouter", "--param", "packets", "--values", "2,10"]) == 0
    out = capsys.readouterr().out
    assert "vrouter[packets=2]" in out and "vrouter[packets=10]" in out


def test_cli_sweep_unknown_param(capsys):
    assert cli.main(["sweep", "--scenario", "vrouter", "--param", "bogus", "--values", "1"]) == 1
    assert "UnknownParameter" in capsys.readouterr().err


def test_cli_bad_mode_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--scenario", "vrouter", "--mode", "turbo"])
    assert exc.value.code == 2


@pytest.mark.parametrize("name", sorted(BUNDLED))
def test_scenario_dict_roundtrip(name):
    sc = load(name)
    assert ex.Scenario.from_dict(sc.to_dict()).to_dict() == sc.to_dict()
