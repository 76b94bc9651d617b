import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from absorbmc import cli
from absorbmc.cli import _cell, main, to_csv
from absorbmc.config import ConfigError, bundled_presets, load_config
from absorbmc.lattice_walk import AbsorberSpec, WalkConfig, build_chain, occupancy_at, reachable_steps


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def floats(rows, key):
    return np.array([float(r[key]) if r[key] != "" else math.nan for r in rows])


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


WALK_1D = {
    "seed": 3,
    "observation": {"sites": [[4]], "n_max": 30},
    "absorber": {"sites": [[2], [4], [6]], "q": [0.0, 0.5, 1.0]},
}


def test_presets_are_bundled():
    assert bundled_presets() == ["fig10", "fig11", "fig12", "fig3", "fig4-6", "fig7", "fig8", "fig9"]
    for name in bundled_presets():
        cfg = load_config(None, name)
        assert cfg["command"] in cli.COMMANDS
        assert cfg.walk.delta == 1.0 and cfg.walk.tau == 1.0


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_cells_round_trip(v):
    assert float(_cell(v)) == v


def test_cells_and_csv_dialect():
    assert _cell(True) == "true" and _cell(np.bool_(False)) == "false"
    assert _cell(None) == "" and _cell(np.int64(7)) == "7"
    text = to_csv(["a", "b"], [[0.1, "x,y"], [1e-300, None]])
    assert text == 'a,b\n0.1,"x,y"\n1e-300,\n'


def test_walk_csv_matches_library(tmp_path):
    assert main(["walk", "--config", write_config(tmp_path, WALK_1D), "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "walk.csv")
    assert len(rows) == 3 * 3 * len(reachable_steps((4,), 30))
    sel = [r for r in rows if r["m"] == "2" and r["q"] == "0.5"]
    chain = build_chain(WalkConfig(1), AbsorberSpec((2,), 0.5), None, "exempt-final-arrival", n_max=30, observe=(4,))
    ref = occupancy_at(chain, (4,), reachable_steps((4,), 30)).probability
    assert np.array_equal(floats(sel, "probability"), ref)
    # closed-form overlay agrees with the chain everywhere, not only at q = 0
    assert np.max(np.abs(floats(rows, "probability") - floats(rows, "closed_form"))) <= 1e-12
    meta = json.loads((tmp_path / "o" / "metadata.json").read_text())
    assert meta["exit_status"] == 0 and meta["seed"] == 3 and meta["units"]["system"] == "lattice"
    assert "walk.csv" in meta["files"]


def test_entry_convention_overlay(tmp_path):
    doc = {**WALK_1D, "absorber": {**WALK_1D["absorber"], "convention": "apply-on-entry"}}
    assert main(["walk", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "walk.csv")
    assert {r["convention"] for r in rows} == {"apply-on-entry"}
    assert np.max(np.abs(floats(rows, "probability") - floats(rows, "closed_form"))) <= 1e-12


def test_fig3_preset(preset_runs):
    code, out, _ = preset_runs["fig3"]
    assert code == 0
    rows = read_csv(out / "walk.csv")
    free = [r for r in rows if r["q"] == "0.0" and r["m"] == "100"]
    assert np.max(np.abs(floats(free, "probability") - floats(free, "closed_form"))) <= 1e-12
    for q in ("0.25", "0.5", "0.75", "1.0"):
        far = [r for r in rows if r["q"] == q and r["m"] == "100"]
        assert [r["n"] for r in far] == [r["n"] for r in free]
        assert np.max(np.abs(floats(far, "probability") - floats(free, "probability"))) <= 1e-6
    assert max(int(r["n"]) for r in rows) == 200


def test_fig9_preset(preset_runs):
    code, out, _ = preset_runs["fig9"]
    assert code == 0
    rows = read_csv(out / "walk.csv")
    by_q = {}
    for r in rows:
        by_q.setdefault(float(r["q"]), []).append(r)
    qs = sorted(by_q)
    P = np.array([floats(by_q[q], "probability") for q in qs])
    n = floats(by_q[qs[0]], "n")
    late = n > 4  # the first arrival at n = 4 is exempt and shared by every q
    assert np.all(np.diff(P[:, late], axis=0) < 0)
    assert np.all(np.diff(P[:, n == 4], axis=0) == 0)
    assert "mc_probability" in rows[0] and "closed_form" not in rows[0]
    for q in qs:
        p, mc, se = (floats(by_q[q], k) for k in ("probability", "mc_probability", "mc_stderr"))
        ok = np.abs(mc - p) <= 4 * np.maximum(se, 1e-12) + 1e-12
        assert ok.mean() >= 0.97


def test_fig4_6_preset(preset_runs):
    code, out, _ = preset_runs["fig4-6"]
    assert code == 0
    rows = read_csv(out / "fit.csv")
    assert all(r["converged"] == "true" for r in rows)
    for r in rows:
        if r["q"] == "0.0":
            assert abs(float(r["alpha"]) - 2) <= 1e-2 and abs(float(r["beta"]) - 1) <= 1e-2
            assert float(r["gamma"]) <= 1e-2
    recv = [r for r in rows if r["m"] == "10" and float(r["q"]) >= 0.25]
    assert all(float(r["gamma"]) > 0.5 for r in recv if float(r["alpha"]) > 0)
    curves = read_csv(out / "curves.csv")
    assert {"target", "fitted"} <= set(curves[0])
    tables = json.loads((out / "params.json").read_text())["tables"]
    assert len(tables) == 6 and all(len(t["q"]) == 11 for t in tables)


def test_fig7_preset(preset_runs):
    code, out, _ = preset_runs["fig7"]
    assert code == 0
    rows = read_csv(out / "concentration.csv")
    for x in range(1, 13):
        sel = [r for r in rows if r["x"] == str(x)]
        ok = [r for r in sel if r["status"] == "ok"]
        # divergent rows are kept and marked, never dropped
        assert len(sel) == 4
        assert all(r["concentration"] == "" for r in sel if r["status"] == "divergent")
        c = floats(ok, "concentration")
        assert np.all(np.diff(c) <= 0)
        if x > 6:
            q1 = [r for r in sel if r["q"] == "1.0"][0]
            assert float(q1["concentration"]) == 0.0
    assert any(r["status"] == "divergent" for r in rows)


def test_fig8_preset(preset_runs):
    code, out, _ = preset_runs["fig8"]
    assert code == 0
    rows = read_csv(out / "concentration.csv")
    assert all(r["status"] == "ok" for r in rows)
    c = floats(rows, "concentration")
    assert np.all(np.diff(c) < 0)
    assert c[-1] / c[0] <= 0.3


def test_fig11_preset(preset_runs):
    code, out, _ = preset_runs["fig11"]
    assert code == 0
    rows = read_csv(out / "concentration.csv")
    first = rows[0]
    assert first["q"] == "0.0" and first["source"] == "free-diffusion"
    D = 1 / 6
    assert abs(float(first["concentration"]) - 10 / (2 * math.pi * D * 4)) <= 1e-9 * float(first["concentration"])
    c = floats(rows, "concentration")
    assert np.all(np.diff(c) < 0)
    assert 0.55 <= c[-1] / c[0] <= 0.8


def _queue_rows(out):
    rows = read_csv(out / "queue.csv")
    groups = {}
    for r in rows:
        groups.setdefault((r["m1"] if "m1" in r else r["m"], r["T_trafficking"]), []).append(r)
    return rows, groups


def test_fig10_preset(preset_runs):
    code, out, _ = preset_runs["fig10"]
    assert code == 0
    rows, groups = _queue_rows(out)
    assert all(r["status"] == "ok" for r in rows)
    for g in groups.values():
        q, la = floats(g, "q"), floats(g, "lambda_a")
        assert np.all(np.diff(q) <= 0) and np.all(np.diff(la) >= 0)


def test_fig12_preset(preset_runs):
    code, out, _ = preset_runs["fig12"]
    assert code == 0
    rows, groups = _queue_rows(out)
    assert all(r["status"] == "ok" for r in rows)
    for (_, T), g in groups.items():
        la = floats(g, "lambda_a")
        assert abs(la[-1] * float(T) - 1) <= 0.05
        assert np.all(np.diff(floats(g, "q")) <= 0) and np.all(np.diff(la) >= 0)
    # larger trafficking time congests (q* < 1/2) at a smaller release rate
    for site in ("4", "6"):
        first = []
        for T in ("0.5", "1.0", "2.0"):
            g = groups[(site, T)]
            first.append(min(float(r["Q"]) for r in g if float(r["q"]) < 0.5))
        assert first[0] >= first[1] >= first[2] and first[0] > first[2]
    near, far = floats(groups[("4", "1.0")], "q"), floats(groups[("6", "1.0")], "q")
    assert np.all(far >= near)


def test_param_table_reuse(tmp_path, preset_runs):
    _, out, _ = preset_runs["fig8"]
    doc = json.loads(json.dumps(load_config(None, "fig8").raw))
    doc.pop("command")
    doc["param_table"] = str(out / "params.json")
    assert main(["concentration", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "concentration.csv").read_text() == (out / "concentration.csv").read_text()
    doc["observation"]["sites"] = [[9]]
    assert main(["concentration", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "p")]) == 2


def test_instantaneous_emission(tmp_path):
    doc = {
        "observation": {"sites": [[6]], "n_max": 40},
        "absorber": {"sites": [[3]]},
        "fit": {"q_grid": [0.0, 0.5]},
        "emission": {"mode": "instantaneous", "N": 100.0},
    }
    assert main(["concentration", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "concentration.csv")
    assert {r["n"] for r in rows} == {str(n) for n in range(6, 41, 2)}
    assert all(float(r["concentration"]) >= 0 for r in rows)


def test_seed_override_changes_monte_carlo(tmp_path):
    doc = {**WALK_1D, "absorber": {"sites": [[2]], "q": [0.5]}, "monte_carlo": {"walkers": 5000}}
    cfg = write_config(tmp_path, doc)
    for tag, seed in (("a", "1"), ("b", "1"), ("c", "0x2")):
        assert main(["walk", "--config", cfg, "--seed", seed, "--out", str(tmp_path / tag)]) == 0
    a, b, c = ((tmp_path / t / "walk.csv").read_text() for t in "abc")
    assert a == b and a != c
    assert json.loads((tmp_path / "c" / "metadata.json").read_text())["seed"] == 2


def test_plot_flag_writes_png(tmp_path):
    cfg = write_config(tmp_path, WALK_1D)
    assert main(["walk", "--config", cfg, "--out", str(tmp_path / "o"), "--plot"]) == 0
    png = tmp_path / "o" / "walk.png"
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert main(["walk", "--config", cfg, "--out", str(tmp_path / "n")]) == 0
    assert not (tmp_path / "n" / "walk.png").exists()


def test_plots_for_every_command(tmp_path):
    doc = {
        "walk": {"dimension": 3},
        "observation": {"sites": [[3, 0, 0]]},
        "absorber": {"at_observation": True},
        "fit": {"q_grid": [0.0, 0.5, 1.0]},
        "receptor": {"sites": [[3, 0, 0]], "Q": [0.1, 10.0]},
        "emission": {"Q": 1.0},
    }
    cfg = write_config(tmp_path, doc)
    for cmd, png in (("fit", "params.png"), ("concentration", "concentration.png"), ("queue", "queue.png")):
        assert main([cmd, "--config", cfg, "--out", str(tmp_path / cmd), "--plot"]) == 0
        assert (tmp_path / cmd / png).stat().st_size > 1000


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"walk": {"dimension": 4}}, "walk.dimension"),
        ({"observation": {"sites": [[1, 2]]}}, "observation.sites.0"),
        ({"fit": {"q_grid": [0.5, 0.2]}}, "fit.q_grid"),
        ({"walk": {"dimension": 2, "p": 0.3}}, "walk.p"),
        ({"receptor": {"sites": [[0]]}}, "receptor.sites.0"),
        ({"seed": -1}, "seed"),
        ({"bogus": 1}, ""),
    ],
)
def test_config_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError) as info:
        load_config(doc)
    assert info.value.path == path


@pytest.mark.parametrize(
    "argv",
    [
        ["walk", "--preset", "nope"],
        ["walk", "--preset", "fig7"],
        ["walk", "--config", "/nonexistent/cfg.json"],
    ],
)
def test_config_exit_code(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == 2


def test_missing_sites_and_bad_json_exit_code(tmp_path):
    assert main(["walk", "--config", write_config(tmp_path, {}), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["walk", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_thread_cap_exit_code(tmp_path, monkeypatch):
    monkeypatch.setenv("ABSORBMC_THREADS", "lots")
    assert main(["walk", "--config", write_config(tmp_path, WALK_1D), "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("ABSORBMC_THREADS", "1")
    assert main(["walk", "--config", write_config(tmp_path, WALK_1D), "--out", str(tmp_path)]) == 0


def test_domain_exit_code(tmp_path, capsys):
    # 1-D receptor: large release rates push q below the table's validity limit
    doc = {
        "receptor": {"sites": [[6]], "Q": [0.01, 10.0]},
        "fit": {"q_grid": [0.25, 0.5, 0.75, 1.0]},
    }
    assert main(["queue", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)]) == 4
    rows = read_csv(tmp_path / "queue.csv")
    assert [r["status"] for r in rows] == ["ok", "domain-error"]
    assert "below the table minimum" in rows[1]["message"]
    assert "no fixed point" in capsys.readouterr().err
    trunc = {"observation": {"sites": [[4]], "n_max": 60, "radius": 5}, "absorber": {"sites": [[1]]}}
    assert main(["walk", "--config", write_config(tmp_path, trunc), "--out", str(tmp_path)]) == 4


def test_nonconvergence_exit_code(tmp_path):
    doc = {
        "walk": {"dimension": 3},
        "receptor": {"sites": [[3, 0, 0]], "Q": [100.0], "max_iter": 2},
        "fit": {"q_grid": [0.0, 0.5, 1.0]},
    }
    assert main(["queue", "--config", write_config(tmp_path, doc), "--out", str(tmp_path)]) == 3
    rows = read_csv(tmp_path / "queue.csv")
    assert rows[0]["status"] == "not-converged"
    assert json.loads((tmp_path / "metadata.json").read_text())["exit_status"] == 3
