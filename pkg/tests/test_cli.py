import json
import subprocess
import sys

import numpy as np
import pytest

from capdirac.cli import ConfigError, load_config, main, read_report

FREE = """\
[physics]
hbar = 0.2

[grid]
half_length = 4.0
n = 32

[run]
operator = free
"""

BARRIER = """\
[physics]
hbar = 0.2

[potential]
bump_left = -0.75, 0.5, 1.1, 0, 0, 0
bump_right = 0.75, 0.5, 1.1, 0, 0, 0

[cap]
R1 = {R1}
R2 = 2.0
delta0 = 1.0

[geometry]
R0 = 2.1
eta = 7.6

[distortion]
taus = 0.15, 0.25

[run]
box = 1.6, 2.1, -0.05, 0.01
target = 1.85
"""


def _write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_spectrum_free_matches_dispersion(tmp_path):
    cfg = _write(tmp_path, FREE)
    out = tmp_path / "out"
    assert main(["spectrum", "--config", cfg, "--out", str(out)]) == 0
    head, summary, rows = read_report(out / "spectrum.jsonl")
    assert "generated" in head and summary["experiment"] == "spectrum"
    k = np.fft.fftfreq(32, d=8.0 / 32) * 2 * np.pi
    want = np.sqrt((0.2 * k) ** 2 + 1)
    got = sorted(r["re"] for r in rows for _ in range(r["multiplicity"]) if r["re"] > 0)
    np.testing.assert_allclose(got, np.sort(want), rtol=1e-10)
    assert (out / "spectrum.csv").read_text().splitlines()[0] == "hbar,im,multiplicity,re"


def test_output_is_reproducible_apart_from_header(tmp_path):
    cfg = _write(tmp_path, FREE)
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["spectrum", "--config", cfg, "--out", str(d), "--seed", "3"]) == 0
    la = (a / "spectrum.jsonl").read_bytes().split(b"\n", 1)[1]
    lb = (b / "spectrum.jsonl").read_bytes().split(b"\n", 1)[1]
    assert la == lb
    assert (a / "spectrum.csv").read_bytes() == (b / "spectrum.csv").read_bytes()


def test_malformed_config_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, FREE.replace("hbar = 0.2", "hbar = zero"))
    assert main(["spectrum", "--config", cfg]) == 2
    err = capsys.readouterr().err
    assert "run.ini:2:" in err and "hbar" in err


@pytest.mark.parametrize("text", [
    "[physics\nhbar = 0.1\n",
    "[run]\nbox = 1, 2, 0, 1\n",
    "[physics]\nhbar = -0.1\n",
    "[physics]\nhbar = 0.1\n[potential]\nwell = 0, 1, 1, 0, 0, 0\n",
    "[physics]\nhbar = 0.1\n[potential]\nbump = 0, 1, 1\n",
])
def test_config_errors(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text))


def test_hbar_ladder_override(tmp_path):
    rc = load_config(_write(tmp_path, FREE), (0.1, 0.05))
    assert rc.ladder == (0.1, 0.05)
    assert main(["spectrum", "--config", _write(tmp_path, FREE), "--hbar-ladder", "0.1,x"]) == 2


def test_flow_free_model_is_nontrapping(tmp_path):
    text = FREE + "energy = 1.2, 1.5\nradius = 2.0\nt_max = 20\nseeds = 100\n"
    out = tmp_path / "o"
    assert main(["flow", "--config", _write(tmp_path, text), "--out", str(out)]) == 0
    _, summary, rows = read_report(out / "flow.jsonl")
    assert summary["summary"]["verdict"] == "nontrapping" and rows == []


def test_count_zero_potential_exits_cleanly(tmp_path):
    text = FREE.replace("[run]", "[geometry]\nR0 = 2.1\neta = 7.6\n\n[run]") + "box = 1.3, 2.0, -0.03, 0.01\n"
    text = text.replace("half_length = 4.0\nn = 32\n", "xi_max = 3\n")
    out = tmp_path / "o"
    assert main(["count", "--config", _write(tmp_path, text), "--out", str(out),
                 "--hbar-ladder", "0.2,0.1"]) == 0
    _, _, rows = read_report(out / "count.jsonl")
    assert [r["resonances"] for r in rows] == [0, 0]


def test_compare_declared_regime_mismatch_exits_4(tmp_path):
    text = BARRIER.format(R1=1.4) + "regime = intersecting\n"
    assert main(["compare", "--config", _write(tmp_path, text)]) == 4


def test_compare_single_rung(tmp_path):
    out = tmp_path / "o"
    cfg = _write(tmp_path, BARRIER.format(R1=1.4))
    assert main(["compare", "--config", cfg, "--out", str(out), "--threads", "1"]) == 0
    _, summary, rows = read_report(out / "compare.jsonl")
    assert summary["summary"]["regime"] == "non-intersecting"
    (r,) = rows
    assert r["status"] == "hypothesis unmet" and r["distance"] < 1e-2
    json.dumps(rows)


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, FREE)
    res = subprocess.run([sys.executable, "-m", "capdirac", "spectrum", "--config", cfg,
                          "--out", str(tmp_path / "m")], capture_output=True, text=True,
                         env={"CAPDIRAC_THREADS": "1", "PATH": ""})
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "m" / "spectrum.jsonl").exists()
