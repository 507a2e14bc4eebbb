import numpy as np
import pytest

from tncraft import fixture_path
from tncraft.cli import main
from tncraft.datasets import write_pgm

DEEP = str(fixture_path("deep.net"))
WIDE = str(fixture_path("wide.net"))

TINY_NET = """\
I  8 8  1
C1 4 4 16 1 2 2 2 1 - -
C2 2 2  8 2 2 2 2 8 - -
"""


def test_validate_deep_passes(capsys):
    assert main(["validate", DEEP]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 * 15 + 1
    assert all(line.startswith("PASS") for line in lines)


def test_validate_constraint_violation(tmp_path, capsys):
    spec = tmp_path / "big.net"
    spec.write_text("I 2 2 129\nC1 2 2 3 1 1 1 1 129 - -\n")
    assert main(["validate", str(spec)]) == 1
    assert "FAIL C1     fanin   fan-in 129 > 128" in capsys.readouterr().out


@pytest.mark.parametrize("content", ["I 4 4 1\nC1 4 4 x 1 1 1 1 1 - -\n", None])
def test_validate_io_errors(tmp_path, content, capsys):
    spec = tmp_path / "bad.net"
    if content is not None:
        spec.write_text(content)
    assert main(["validate", str(spec)]) == 2
    assert "error" in capsys.readouterr().err


def test_map_wide_total(capsys):
    assert main(["map", WIDE]) == 0
    assert capsys.readouterr().out.rstrip().endswith("total 4096 (splitters 1408)")


def test_map_csv_is_stable(capsys):
    main(["map", DEEP, "--estimate", "--csv"])
    first = capsys.readouterr().out
    main(["map", DEEP, "--estimate", "--csv"])
    assert capsys.readouterr().out == first
    assert first.startswith("name,rows,cols")


def test_power_outputs(capsys):
    assert main(["power", "--cores", "4096"]) == 0
    assert "total 100.000 mW" in capsys.readouterr().out
    assert main(["power", DEEP]) == 0
    out = capsys.readouterr().out
    assert "total 99.609 mW" in out and "99.64 mW" in out
    assert main(["power", "--cores", "5000"]) == 1
    assert main(["power"]) == 2


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as info:
        main(["map", DEEP, "--bogus"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


@pytest.fixture
def tiny_setup(tmp_path):
    spec = tmp_path / "tiny.net"
    spec.write_text(TINY_NET)
    data = tmp_path / "objs"
    data.mkdir()
    rng = np.random.default_rng(0)
    protos = rng.random((4, 8, 8)) < 0.5
    for obj in range(4):
        for view in range(6):
            img = protos[obj] ^ (rng.random((8, 8)) < 0.05)
            write_pgm(data / f"obj{obj}__{view * 5}.pgm", img.astype(np.uint8) * 255)
    return spec, data


def test_train_run_pipeline_is_reproducible(tiny_setup, tmp_path, capsys):
    spec, data = tiny_setup
    outs = []
    for k in range(2):
        w = tmp_path / f"w{k}.tnwt"
        trace = tmp_path / f"t{k}.txt"
        assert main(["--seed", "7", "train", str(spec), "--data", str(data), "--out", str(w),
                     "--iterations", "60", "--batch-size", "8"]) == 0
        assert main(["--seed", "7", "run", str(spec), "--weights", str(w), "--data", str(data),
                     "--trace", str(trace)]) == 0
        outs.append((w.read_bytes(), trace.read_text()))
    assert outs[0] == outs[1]
    assert outs[0][1].startswith("# sample 0\n")
    assert "accuracy" in capsys.readouterr().out


def test_run_rate_and_report(tiny_setup, tmp_path, capsys):
    spec, data = tiny_setup
    w = tmp_path / "w.tnwt"
    main(["train", str(spec), "--data", str(data), "--out", str(w), "--iterations", "40",
          "--dropout", "0"])
    capsys.readouterr()
    assert main(["run", str(spec), "--weights", str(w), "--data", str(data),
                 "--coding", "rate", "--ticks", "8"]) == 0
    assert "coding rate  ticks 8" in capsys.readouterr().out
    report = tmp_path / "report.txt"
    assert main(["report", str(spec), "--weights", str(w), "--data", str(data),
                 "--out", str(report)]) == 0
    text = report.read_text()
    assert "prediction agreement 1.0000" in text and "total " in text


def test_run_missing_weights(tiny_setup, tmp_path):
    spec, data = tiny_setup
    assert main(["run", str(spec), "--weights", str(tmp_path / "nope"), "--data", str(data)]) == 2


def test_train_class_mismatch(tiny_setup, tmp_path):
    spec, data = tiny_setup
    assert main(["train", str(spec), "--data", str(data), "--out", str(tmp_path / "w"),
                 "--classes", "3"]) == 1
