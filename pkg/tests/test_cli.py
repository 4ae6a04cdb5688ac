import json
import subprocess
import sys

import numpy as np
import pytest

from fuse4d.cli import main
from fuse4d.io import read_report, read_sequence
from fuse4d.metrics import RoughnessParams, sequence_roughness


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "sphere"
    assert run("synth", "--out", d, "--frames", 5, "--size", 64, "--depth-noise-mm", 0.2,
               "--intensity-noise", 0.02, "--seed", 3) == 0
    return d


def tree_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_synth_deterministic(tmp_path, small):
    assert run("synth", "--out", tmp_path / "b", "--frames", 5, "--size", 64, "--depth-noise-mm", 0.2,
               "--intensity-noise", 0.02, "--seed", 3) == 0
    assert tree_bytes(small) == tree_bytes(tmp_path / "b")
    prov = json.loads((small / "provenance.json").read_text())
    assert prov["command"] == "synth" and prov["parameters"]["noise"]["seed"] == 3


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "fuse4d", "synth", "--out", str(tmp_path / "p"),
                        "--scene", "plane", "--frames", "2", "--size", "16"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "p" / "manifest.txt").exists()


def test_usage_errors(tmp_path, small, capsys):
    with pytest.raises(SystemExit) as e:
        run("fuse", "--in", small, "--out", tmp_path / "f", "--frames-fused", 4)
    assert e.value.code == 1
    assert "frames-fused must be odd" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 1
    assert run("baseline", "--in", small, "--out", tmp_path / "x", "--method", "wavelet") == 1
    assert run("baseline", "--in", small, "--out", tmp_path / "x", "--method", "gaussian",
               "--sigma-spatial", -1) == 1
    assert run("pipeline", "--experiment", "fig9", "--out", tmp_path / "p") == 1
    assert run("eval", "--in", small, "--csv", tmp_path / "e.csv", "--gt-radius", "big") == 1
    assert run("synth", "--out", tmp_path / "s", "--size", 4) == 1
    assert run("fuse", "--in", small, "--out", tmp_path / "f", "--delta-g", 0) == 1


def test_data_errors(tmp_path, small):
    assert run("fuse", "--in", tmp_path / "missing", "--out", tmp_path / "f") == 2
    assert run("eval", "--in", tmp_path / "missing", "--csv", tmp_path / "e.csv") == 2
    bad = tmp_path / "bad"
    bad.mkdir()
    (bad / "manifest.txt").write_text("format = something-else\n")
    assert run("baseline", "--in", bad, "--out", tmp_path / "o", "--method", "gaussian") == 2
    # sphere leaving the frame is a scene error raised while generating
    assert run("synth", "--out", tmp_path / "big", "--size", 32, "--frames", 40) == 2


def test_gaussian_on_constant_plane(tmp_path):
    assert run("synth", "--out", tmp_path / "p", "--scene", "plane", "--frames", 1, "--size", 24,
               "--center-depth-mm", 250) == 0
    assert run("baseline", "--in", tmp_path / "p", "--out", tmp_path / "g", "--method", "gaussian") == 0
    out = read_sequence(tmp_path / "g")
    assert np.all(out[0].depth.values == 250.0)


def test_temporal_average_reduces_roughness(tmp_path):
    assert run("synth", "--out", tmp_path / "p", "--scene", "plane", "--frames", 9, "--size", 32,
               "--depth-noise-mm", 0.3, "--seed", 1) == 0
    assert run("baseline", "--in", tmp_path / "p", "--out", tmp_path / "t", "--method",
               "temporal_average", "--temporal-radius", 4) == 0
    rp = RoughnessParams(window=5)
    raw = sequence_roughness(read_sequence(tmp_path / "p"), rp)[0]
    avg = sequence_roughness(read_sequence(tmp_path / "t"), rp)[0]
    assert avg < 0.6 * raw
    prov = json.loads((tmp_path / "t" / "provenance.json").read_text())
    assert prov["parameters"]["method"]["temporal_radius"] == 4


def test_eval_noiseless_plane(tmp_path):
    run("synth", "--out", tmp_path / "p", "--scene", "plane", "--frames", 2, "--size", 32)
    assert run("eval", "--in", tmp_path / "p", "--csv", tmp_path / "e.csv") == 0
    rep = read_report(tmp_path / "e.csv")
    assert all(r.mean_roughness_mm == 0.0 for r in rep.rows)
    assert (tmp_path / "e.csv.provenance.json").exists()


def test_fuse_eval_decay(tmp_path, small):
    dirs = []
    for n in (1, 3, 5):
        d = tmp_path / f"f{n}"
        assert run("fuse", "--in", small, "--out", d, "--frames-fused", n, "--threads", 2) == 0
        dirs.append(d)
    args = ["eval", "--csv", tmp_path / "e.csv", "--gt-radius", "auto", "--mlesac-iterations", 100]
    for d in [small] + dirs:
        args += ["--in", d]
    assert run(*args) == 0
    rep = read_report(tmp_path / "e.csv")
    seqs = {r.label: r for r in rep.rows if r.kind == "sequence"}
    assert seqs["f5"].mean_roughness_mm < seqs["sphere"].mean_roughness_mm
    assert seqs["f1"].shape_correctness > 0.9
    decay = [r for r in rep.rows if r.kind == "decay"]
    assert len(decay) == 1 and decay[0].r_squared is not None
    prov = json.loads((tmp_path / "f3" / "provenance.json").read_text())
    assert prov["parameters"]["frames_fused"] == 3


def test_fuse_thread_count_irrelevant(tmp_path, small):
    run("fuse", "--in", small, "--out", tmp_path / "a", "--frames-fused", 3, "--threads", 1)
    run("fuse", "--in", small, "--out", tmp_path / "b", "--frames-fused", 3, "--threads", 3)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    a.pop("provenance.json"), b.pop("provenance.json")
    assert a == b


def test_pipeline_fig4_small(tmp_path):
    assert run("pipeline", "--experiment", "fig4", "--frames", 3, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "fig4.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rep = read_report(tmp_path / "o" / "fig4.csv")
    labels = {r.label for r in rep.rows}
    assert {"raw:sphere", "ours:sphere", "ours:plane"} <= labels
    assert (tmp_path / "o" / "provenance_fig4.json").exists()


def test_pipeline_bad_scale(tmp_path):
    assert run("pipeline", "--experiment", "fig2", "--scale", "huge", "--out", tmp_path) == 1
    assert run("pipeline", "--experiment", "fig2", "--frames", 1, "--out", tmp_path) == 1
