import csv
from fractions import Fraction

import numpy as np
import pytest

from convoy.bench import (
    CSV_FIELDS,
    DETECT_SHAPE,
    PRESETS,
    BenchConfig,
    DetectionStats,
    bench_layer,
    count_costs,
    dedupe,
    model_totals,
    preset_layers,
    random_input,
    random_kernels,
    relu_local,
    run_detection_experiment,
    sweep_shapes,
    theoretical_ratio,
    write_csv,
    write_detection_csv,
)
from convoy.keymask import SecurityParams
from convoy.net import Client, ConvServer
from convoy.tensor import ConvShape


def test_ratio_examples():
    assert theoretical_ratio(ConvShape(3, 3, 1, 1, 1)) == 2
    r = theoretical_ratio(ConvShape(18, 18, 3, 64, 64))
    assert r == Fraction(5, 288)
    assert abs(float(r) - 0.01736) < 1e-5


def test_ratio_decreases_with_output_channels():
    values = [theoretical_ratio(ConvShape(8, 8, 3, 16, c)) for c in (1, 2, 4, 8, 64, 512)]
    assert values == sorted(values, reverse=True)


def test_count_costs_example():
    costs = count_costs(ConvShape(2, 2, 2, 1, 1), 4)
    assert costs["blind"] == (4, 16)
    assert costs["verify"] == (5, 0)
    assert costs["recover"] == (0, 4)
    with pytest.raises(ValueError):
        count_costs(ConvShape(2, 2, 2, 1, 1), 0)


def random_shape(rng):
    k = int(rng.integers(1, 4))
    return ConvShape(int(rng.integers(k, 9)), int(rng.integers(k, 9)), k, int(rng.integers(1, 5)), int(rng.integers(1, 5)))


def test_counters_match_closed_form(rng):
    for _ in range(50):
        shape = random_shape(rng)
        mode = "int" if rng.random() < 0.5 else "float"
        server = ConvServer(random_kernels(shape, mode, rng), mode=mode)
        _, state = Client(server, SecurityParams(mode=mode), rng).infer(random_input(shape, mode, rng))
        want = count_costs(shape, state.sk)
        for phase in ("blind", "verify", "recover"):
            got = state.counters[phase]
            assert (got.sm, got.sa) == want[phase], (shape, phase)
        assert state.server_sm == want["server"][0]


@pytest.mark.parametrize("name", PRESETS)
def test_presets(name):
    layers = preset_layers(name)
    assert layers
    for prev, cur in zip(layers, layers[1:]):
        if name.startswith("vgg") or name == "cnn3layer":
            assert cur.c_in == prev.c_out
    assert all(s.out_rows >= 1 for s in layers)


def test_preset_sizes():
    assert len(preset_layers("vgg16")) == 13 and len(preset_layers("vgg19")) == 16
    assert len(preset_layers("resnet50")) == 1 + 3 * 16 + 4
    assert preset_layers("cnn3layer")[0] == ConvShape(15, 15, 3, 103, 32)
    assert preset_layers("vgg16", size=64)[0].out_rows == 64
    with pytest.raises(ValueError):
        preset_layers("alexnet")


def test_dedupe():
    a, b = ConvShape(4, 4, 1, 1, 1), ConvShape(5, 5, 1, 1, 1)
    assert dedupe([a, b, a, a]) == [(a, 3), (b, 1)]


def test_relu():
    np.testing.assert_array_equal(relu_local(np.array([[-2, 0, 3]])), [[0, 0, 3]])
    assert relu_local(np.array([-1.5, 2.0])).dtype == np.float64


def test_sweep_shapes():
    assert [s.c_in for s in sweep_shapes("cin", [1, 2])] == [1, 2]
    assert [s.c_out for s in sweep_shapes("cout", [3, 4], c_in=5)] == [3, 4]
    with pytest.raises(ValueError):
        sweep_shapes("k", [1])


def test_bench_layer_and_csv(tmp_path):
    cfg = BenchConfig(repetitions=2, mode="int")
    t = bench_layer(ConvShape(8, 8, 3, 2, 4), cfg, seed=3)
    assert t.measured_ratio == Fraction(4 + 18, 2 * 4 * 9)
    assert t.client_ms > 0 and t.original_compute_ms > 0
    path = tmp_path / "bench.csv"
    write_csv(path, [t])
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == CSV_FIELDS
    assert [r["phase"] for r in rows] == ["blind", "verify", "recover", "server_compute", "roundtrip", "original_compute"]
    totals = model_totals([t])
    assert totals["scheme_ms"] == pytest.approx(t.scheme_ms)


def test_parallel_bench_marks_contended():
    t = bench_layer(ConvShape(6, 6, 3, 2, 2), BenchConfig(repetitions=3, parallel=2), seed=1)
    assert t.contended


def test_detection_small_run(tmp_path):
    params = SecurityParams(lambda1=16)
    stats = run_detection_experiment("tamper-one", 200, DETECT_SHAPE, params, seed=5)
    assert stats.detected == 200 and stats.false_rejections == 0 and stats.passed
    write_detection_csv(tmp_path / "d.csv", [stats])
    assert (tmp_path / "d.csv").read_text().startswith("behavior,")


def test_single_entry_tamper_never_escapes():
    # every entry of r is nonzero, so one wrong entry always shows in its column
    stats = run_detection_experiment("tamper-one", 300, ConvShape(3, 3, 1, 1, 1), SecurityParams(lambda1=1), seed=0)
    assert stats.rate == 1.0


def test_two_entry_tamper_escapes_near_floor_at_tiny_lambda():
    # |Z| = 2 at lambda1 = 1; two errors in one column cancel with probability 1/2
    stats = run_detection_experiment("tamper-sparse:2", 600, ConvShape(1, 1, 1, 1, 2), SecurityParams(lambda1=1), seed=0)
    assert stats.floor == 0.5
    assert 0.4 < stats.rate < 0.6


def test_detection_stats_math():
    s = DetectionStats(trials=10**4, behavior="x", lambda1=16, mode="int", detected=10**4)
    assert s.floor == 1 - 1 / (2 * (2**16 - 1))
    assert s.threshold < s.floor and s.passed
    with pytest.raises(ValueError):
        DetectionStats(trials=1, behavior="x", lambda1=1, mode="int", detected=2)
