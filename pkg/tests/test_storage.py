import json

import numpy as np
import pytest

from gravistab.equilibria import King, TabulatedF, build_equilibrium
from gravistab.radial_numerics import MonotoneMap, RadialProfile, make_grid
from gravistab.storage import (dump_json, law_from_params, load_model, read_grid_binary, read_profile_csv,
                               save_model, write_grid_binary, write_profile_csv)


def test_model_round_trip(king, tmp_path):
    d = save_model(king, tmp_path / "king")
    back = load_model(d)
    assert back.law == king.law
    for attr in ("E0", "M", "R", "phi_c", "u_c"):
        assert getattr(back, attr) == getattr(king, attr)
    for name in ("phi", "rho", "dphi"):
        a, b = getattr(king, name), getattr(back, name)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.grid.nodes, b.grid.nodes)
        assert a.extrapolation == b.extrapolation and a.decay == b.decay
    doc = json.loads((d / "model.json").read_text())
    assert doc["law"]["kind"] == "king" and doc["grid_ref"]["n"] == len(king.grid)
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing")


def test_polytrope_round_trip(poly1, tmp_path):
    back = load_model(save_model(poly1, tmp_path / "p"))
    assert back.law == poly1.law
    assert back.rho(0.3) == poly1.rho(0.3)


def test_law_params():
    assert law_from_params({"kind": "king"}) == King()
    y = np.linspace(0.0, 1.0, 5)
    law = TabulatedF(MonotoneMap(y, y ** 2, "increasing"))
    back = law_from_params(json.loads(json.dumps(law.params())))
    assert np.array_equal(back.F_depth(np.array([0.3])), law.F_depth(np.array([0.3])))
    with pytest.raises(ValueError):
        law_from_params({"kind": "plummer"})


def test_profile_csv(tmp_path):
    g = make_grid(1.0, 32)
    p = RadialProfile(g, np.sin(g.nodes) + 1e-17, "inverse_r", 2.0)
    write_profile_csv(tmp_path / "p.csv", p)
    back = read_profile_csv(tmp_path / "p.csv")
    assert np.array_equal(back.values, p.values) and back.extrapolation == "inverse_r" and back.decay == 2.0
    (tmp_path / "p.json").unlink()
    assert read_profile_csv(tmp_path / "p.csv").extrapolation == "zero"


def test_grid_binary(tmp_path, rng):
    v = rng.normal(size=(4, 5, 6))
    ext = [(0.0, 1.0), (0.0, 2.0), (-1.0, 1.0)]
    write_grid_binary(tmp_path / "g.bin", v, ext)
    back, e = read_grid_binary(tmp_path / "g.bin")
    assert np.array_equal(back, v) and e == ext
    raw = (tmp_path / "g.bin").read_bytes()
    assert len(raw) == 8 + 3 * 8 + 6 * 8 + v.size * 8
    (tmp_path / "g.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_grid_binary(tmp_path / "g.bin")
    with pytest.raises(ValueError):
        write_grid_binary(tmp_path / "h.bin", v, ext[:2])


def test_dump_json_deterministic(tmp_path):
    dump_json(tmp_path / "a.json", {"b": 0.1, "a": [1, 2.5]})
    dump_json(tmp_path / "b.json", {"a": [1, 2.5], "b": 0.1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    with pytest.raises(ValueError):
        dump_json(tmp_path / "c.json", {"x": float("nan")})
