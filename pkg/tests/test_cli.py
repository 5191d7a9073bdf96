import json
import math
import shutil
import subprocess

import pytest

from bsvie_lab import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    values = json.loads(out.out.strip().splitlines()[-1]) if out.out.strip() else None
    return code, values, out.err


def test_constants(capsys):
    code, v, _ = run(capsys, "constants", "--beta", "174", "--frakf", "0")
    assert code == 0
    assert v["type1_ok"] is True


def test_min_beta(capsys):
    code, v, _ = run(capsys, "min-beta", "--frakf", "0", "--condition", "type1")
    assert code == 0
    assert v["beta"] == pytest.approx(171.74598068588006, rel=1e-9)


def test_ode_exp(capsys):
    code, v, _ = run(capsys, "solve-type1", "--preset", "ode-exp", "--steps", "500")
    assert code == 0
    assert abs(v["Y0"] - math.e) < 2 * math.e / 500


def test_girsanov(capsys):
    code, v, _ = run(capsys, "solve-bsde", "--preset", "girsanov-drift")
    assert code == 0
    assert v["Y0"] == pytest.approx(0.5, abs=1e-13)


def test_out_dir_layout_and_replay(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "solve-type1", "--preset", "lipschitz-standard", "--out", str(a))[0] == 0
    for name in ("config.echo", "results.json", "meta.json"):
        assert (a / name).exists()
    assert list((a / "tables").glob("*.csv"))
    # replay from the echoed config gives identical results
    assert run(capsys, "run", str(a / "config.echo"), "--out", str(b))[0] == 0
    assert (a / "results.json").read_bytes() == (b / "results.json").read_bytes()
    assert (a / "config.echo").read_text() == (b / "config.echo").read_text()
    meta = json.loads((a / "meta.json").read_text())
    assert meta["run_id"] == json.loads((b / "meta.json").read_text())["run_id"]
    assert {"version", "numpy", "python", "seed", "converged", "timings"} <= set(meta)
    # refuses to overwrite
    assert run(capsys, "run", str(a / "config.echo"), "--out", str(a))[0] == 2


def test_table_rows(tmp_path, capsys):
    run(capsys, "solve-bsde", "--preset", "girsanov-drift", "--out", str(tmp_path / "r"))
    lines = next((tmp_path / "r" / "tables").glob("*.csv")).read_text().splitlines()
    assert lines[0] == "run_id,statistic,t,s,value"
    assert len(lines) > 1


def test_malformed_config(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[run]\ncommand = solve-type1\n[world]\nsteps = three\n")
    out = tmp_path / "out"
    code, v, err = run(capsys, "run", str(cfg), "--out", str(out))
    assert code == 2 and v is None
    assert "world.steps" in err
    assert not out.exists()


def test_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[solver]\nwarp = 9\n")
    code, _, err = run(capsys, "constants", "--config", str(cfg))
    assert code == 2 and "solver.warp" in err


def test_bad_choice(capsys):
    code, _, err = run(capsys, "solve-type1", "--engine", "magic")
    assert code == 2 and "solver.engine" in err


def test_priority_order(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[analysis]\nbeta = 10\n")
    # file < flag < --set
    _, v, _ = run(capsys, "constants", "--config", str(cfg), "--frakf", "0")
    assert v["beta"] == 10
    _, v, _ = run(capsys, "constants", "--config", str(cfg), "--frakf", "0", "--beta", "20")
    assert v["beta"] == 20
    _, v, _ = run(capsys, "constants", "--config", str(cfg), "--frakf", "0", "--beta", "20",
                  "--set", "analysis.beta=30")
    assert v["beta"] == 30


def test_seed_from_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("BSVIE_SEED", "5")
    run(capsys, "simulate", "--steps", "4", "--paths", "50", "--out", str(tmp_path / "e"))
    assert json.loads((tmp_path / "e" / "meta.json").read_text())["seed"] == 5
    run(capsys, "simulate", "--steps", "4", "--paths", "50", "--seed", "9", "--out", str(tmp_path / "f"))
    assert json.loads((tmp_path / "f" / "meta.json").read_text())["seed"] == 9
    assert (tmp_path / "f" / "ensemble.bin").exists()


def test_list_presets(capsys):
    code, v, _ = run(capsys, "list-presets")
    assert code == 0
    names = {p["name"] for p in v["presets"]}
    assert {"ode-exp", "girsanov-drift", "poisson-count", "extra-noise-M", "duality-linear",
            "comparison-partition", "holder-regularity", "lipschitz-standard", "sandwich",
            "type2-linear"} <= names
    assert all(p["oracle"] for p in v["presets"])


def test_compare_needs_sandwich(capsys):
    code, _, err = run(capsys, "compare", "--preset", "ode-exp")
    assert code == 2 and "run.preset" in err


def test_nonconvergence_exit(capsys):
    code, v, _ = run(capsys, "solve-type1", "--preset", "ode-exp", "--steps", "200",
                     "--method", "picard", "--max-iter", "2", "--tol", "1e-14")
    assert code == 3
    assert v["converged"] is False


@pytest.mark.parametrize("argv", [
    ["solve-type1", "--preset", "extra-noise-M"],
    ["solve-type2", "--preset", "type2-linear"],
    ["sfie", "--preset", "lipschitz-standard"],
    ["compare", "--preset", "sandwich"],
    ["partition-compare", "--preset", "comparison-partition"],
    ["duality", "--preset", "duality-linear", "--draws", "3"],
    ["norms", "--preset", "lipschitz-standard"],
    ["regularity", "--preset", "holder-regularity", "--paths", "500", "--steps", "16"],
])
def test_commands_run(capsys, argv):
    code, v, _ = run(capsys, *argv)
    assert code == 0 and v["converged"]


def test_console_script():
    exe = shutil.which("bsvie-lab")
    if exe is None:
        pytest.skip("console script not installed")
    r = subprocess.run([exe, "constants", "--beta", "174", "--frakf", "0"], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["type1_ok"]
