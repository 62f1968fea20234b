"""Command-line interface: manifests, determinism, error codes."""

import json
import os

import pytest

from lorentzgas.cli import main, fixture_path


def run(args):
    return main([str(a) for a in args])


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)


def test_bundled_fixtures_exist():
    for name in ("four_disk", "two_disk", "forced_four_disk"):
        assert os.path.exists(fixture_path(name))


def test_geom_on_fixture(tmp_path):
    assert run(["--out-dir", tmp_path, "geom", "four_disk"]) == 0
    man = read_manifest(tmp_path)
    assert man["command"] == "geom"
    assert "geom.json" in man["outputs"]
    with open(tmp_path / "geom.json") as fh:
        body = json.load(fh)
    assert body["manifest_digest"] == man["digest"]
    assert body["payload"]["metrics"]["horizon"] == "finite"


def test_reruns_are_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(["--seed", 3, "--out-dir", d, "map", "four_disk",
                    "--samples", 500]) == 0
    ma, mb = read_manifest(a), read_manifest(b)
    assert ma["digest"] == mb["digest"]
    assert ma["outputs"] == mb["outputs"]
    assert (a / "map.json").read_bytes() == (b / "map.json").read_bytes()


def test_different_seed_changes_digest(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run(["--seed", 1, "--out-dir", a, "map", "four_disk", "--samples", 200])
    run(["--seed", 2, "--out-dir", b, "map", "four_disk", "--samples", 200])
    assert read_manifest(a)["digest"] != read_manifest(b)["digest"]


def test_map_report_sanity(tmp_path):
    assert run(["--out-dir", tmp_path, "map", "four_disk",
                "--samples", 500]) == 0
    with open(tmp_path / "map.json") as fh:
        payload = json.load(fh)["payload"]
    assert payload["invertibility_error"] < 1e-9
    assert payload["measure_jacobian_error"] < 1e-8
    assert payload["horizon"] == "finite"


def test_invalid_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scatterers": [
        {"R": 0.3, "center": [0.0, 0.0]},
        {"R": 0.3, "center": [0.2, 0.0]}]}))
    assert run(["--out-dir", tmp_path, "geom", bad]) == 2


def test_missing_config_exits_2(tmp_path):
    assert run(["--out-dir", tmp_path, "geom", "no_such_fixture"]) == 2


def test_distance_self_is_floor(tmp_path):
    assert run(["--out-dir", tmp_path, "distance", "four_disk", "four_disk",
                "--grid", 24]) == 0
    with open(tmp_path / "dist.json") as fh:
        payload = json.load(fh)["payload"]
    assert payload["epsilon_star"] == pytest.approx(2.0 ** -20)
    assert payload["mask_area"] == 0.0


def test_forced_subcommand(tmp_path):
    assert run(["--out-dir", tmp_path, "forced", "forced_four_disk",
                "--samples", 20]) == 0
    with open(tmp_path / "forced.json") as fh:
        payload = json.load(fh)["payload"]
    assert payload["samples_used"] > 0
    assert payload["max_energy_drift"] < 1e-9
    assert payload["invertibility_error"] < 1e-7


def test_curves_subcommand(tmp_path):
    assert run(["--out-dir", tmp_path, "curves", "four_disk", "--depth", 2,
                "--curves", 2]) == 0
    man = read_manifest(tmp_path)
    assert "curves.csv" in man["outputs"]
    with open(tmp_path / "curves.csv") as fh:
        first = fh.readline()
    assert first.startswith("# manifest: " + man["digest"])
