import argparse
import csv
import subprocess
import sys

import pytest

from convoy.cli import build_parser, main, parse_shape
from convoy.tensor import ConvShape


def test_parse_shape():
    assert parse_shape("cin=64,cout=64,k=3,m=18") == ConvShape(18, 18, 3, 64, 64)
    assert parse_shape("c_in=2,c_out=3,k=1") == ConvShape(1, 1, 1, 2, 3)
    for bad in ("cin=1,bogus=2", "cin", "cin=1,cout=1,k=5,m=3"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_shape(bad)


def test_ratio_command(capsys):
    assert main(["ratio", "--shape", "cin=64,cout=64,k=3,m=18", "--index-size", "2"]) == 0
    out = capsys.readouterr().out
    assert "5/288" in out
    rows = list(csv.reader(out.splitlines()[1:]))
    assert rows[0] == ["phase", "SM", "SA"]
    assert dict((r[0], r[1:]) for r in rows[1:])["verify"] == [str((64 + 576) * 256), "0"]


def test_detect_command(tmp_path, capsys):
    path = tmp_path / "d.csv"
    code = main(["detect", "--behavior", "lazy-zero", "--trials", "50", "--csv", str(path)])
    assert code == 0
    assert "detected 50/50" in capsys.readouterr().out
    assert path.exists()


def test_bench_phases_command(tmp_path, capsys):
    path = tmp_path / "b.csv"
    code = main(["bench", "phases", "--shape", "m=8,k=3,cin=2,cout=2", "--reps", "1", "--csv", str(path)])
    assert code == 0
    assert "(8,8,3,2,2)" in capsys.readouterr().out
    assert len(path.read_text().splitlines()) == 7


def test_bench_sweep_and_models(capsys):
    assert main(["bench", "sweep", "--axis", "cout", "--values", "1,2", "--base", "m=6,k=3,cin=1", "--reps", "1"]) == 0
    assert main(["bench", "models", "--preset", "cnn3layer", "--size", "7", "--reps", "1"]) == 0
    out = capsys.readouterr().out
    assert "client-side advantage" in out


def test_parser_rejects_unknown_preset():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["bench", "models", "--preset", "alexnet"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "convoy.cli", "ratio", "--shape", "cin=1,cout=1,k=1"],
                         capture_output=True, text=True, check=True)
    assert "= 2" in res.stdout
