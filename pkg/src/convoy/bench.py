"""Experiment harness: cost model, layer presets, timing sweeps and the detection experiment.

Timings are same-machine relative numbers. The client-side baseline is a
compiled direct convolution; the "server" is the same process or a peer
host, so the absolute speedups of a GPU-backed server are out of reach and
not the point.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels
from .keymask import SecretKey, SecurityParams
from .net import Client, ConvServer, VerificationFailed
from .server import ServerBehavior
from .tensor import ConvShape, direct_conv_fast


def theoretical_ratio(shape: ConvShape) -> Fraction:
    """Approximate client/server multiplication ratio (c_out + c_in k^2) / (c_in c_out k^2)."""
    k2 = shape.k * shape.k
    return Fraction(shape.c_out + shape.c_in * k2, shape.c_in * shape.c_out * k2)


def count_costs(shape: ConvShape, key: SecretKey | int) -> dict[str, tuple[int, int]]:
    """Closed-form (SM, SA) per phase for one input; ``key`` may be a key or its index-set size."""
    size = key if isinstance(key, int) else len(key.index_set)
    if size < 1:
        raise ValueError("index set must be nonempty")
    n = shape.windows
    return {
        "blind": (shape.c_in * shape.c_out * shape.k**2, size * shape.patch * n),
        "verify": ((shape.c_out + shape.patch) * n, 0),
        "recover": (0, size * shape.c_out * n),
        "server": (shape.c_out * shape.patch * n, 0),
    }


def relu_local(t) -> np.ndarray:
    """Client-side max(0, x) between layers."""
    t = np.asarray(t)
    return np.maximum(t, np.zeros((), dtype=t.dtype))


def infer_network(client: Client, x, layers: int, activation=relu_local):
    """Run ``layers`` conv layers back to back, activating locally in between."""
    states = []
    for layer in range(layers):
        x, state = client.infer(x, layer)
        states.append(state)
        if layer < layers - 1:
            x = activation(x)
    return x, states


# --------------------------------------------------------------------------
# layer presets (shapes only; weights are seeded noise)


def _layer(size: int, k: int, c_in: int, c_out: int) -> ConvShape:
    # valid convolution producing a size x size map, i.e. the padded layer's input
    return ConvShape(m=size + k - 1, n=size + k - 1, k=k, c_in=c_in, c_out=c_out)


def _vgg(cfg, c_in: int, size: int) -> list[ConvShape]:
    layers = []
    for v in cfg:
        if v == "M":
            size //= 2
            continue
        layers.append(_layer(size, 3, c_in, v))
        c_in = v
    return layers


_VGG16 = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
_VGG19 = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512]
_RESNET_BLOCKS = {"resnet50": (3, 4, 6, 3), "resnet101": (3, 4, 23, 3), "resnet152": (3, 8, 36, 3)}


def _resnet(blocks, c_in: int, size: int) -> list[ConvShape]:
    # bottleneck ResNet; strided convs are modelled at their output resolution
    layers = [_layer(size, 3, c_in, 64)]
    channels = 64
    for stage, count in enumerate(blocks):
        mid = 64 * 2**stage
        out = 4 * mid
        if stage:
            size = max(size // 2, 1)
        for b in range(count):
            layers.append(_layer(size, 1, channels, mid))
            layers.append(_layer(size, 3, mid, mid))
            layers.append(_layer(size, 1, mid, out))
            if b == 0:
                layers.append(_layer(size, 1, channels, out))
            channels = out
    return layers


def _cnn3layer(c_in: int, size: int) -> list[ConvShape]:
    return [
        ConvShape(m=size, n=size, k=3, c_in=c_in, c_out=32),
        ConvShape(m=size - 2, n=size - 2, k=3, c_in=32, c_out=64),
        ConvShape(m=size - 4, n=size - 4, k=3, c_in=64, c_out=128),
    ]


PRESETS = ("vgg16", "vgg19", "resnet50", "resnet101", "resnet152", "cnn3layer")


def preset_layers(name: str, size: int | None = None, c_in: int | None = None) -> list[ConvShape]:
    """Conv-layer shapes of a named model.

    VGG defaults to 32x32 grayscale, ResNet to 32x32 RGB, the three-layer
    hyperspectral CNN to 15x15 patches with 103 bands.
    """
    if name == "vgg16":
        return _vgg(_VGG16, c_in or 1, size or 32)
    if name == "vgg19":
        return _vgg(_VGG19, c_in or 1, size or 32)
    if name in _RESNET_BLOCKS:
        return _resnet(_RESNET_BLOCKS[name], c_in or 3, size or 32)
    if name == "cnn3layer":
        return _cnn3layer(c_in or 103, size or 15)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


# --------------------------------------------------------------------------
# phase timing


@dataclass
class BenchConfig:
    shapes: list[ConvShape] = field(default_factory=list)
    repetitions: int = 3
    mode: str = "float"
    lambda1: int = 16
    lambda2: int = 4
    seed: int | None = 0
    endpoint: object = None
    parallel: int = 1
    csv_path: str | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")

    def params(self) -> SecurityParams:
        return SecurityParams(lambda1=self.lambda1, lambda2=self.lambda2, mode=self.mode)


@dataclass
class PhaseTimings:
    shape: ConvShape
    index_size: int
    blind_ms: float
    verify_ms: float
    recover_ms: float
    roundtrip_ms: float
    server_compute_ms: float
    original_compute_ms: float
    counts: dict[str, tuple[int, int]]
    contended: bool = False
    count: int = 1

    @property
    def client_ms(self) -> float:
        return self.blind_ms + self.verify_ms + self.recover_ms

    @property
    def scheme_ms(self) -> float:
        return self.client_ms + self.roundtrip_ms

    @property
    def speedup(self) -> float:
        return self.original_compute_ms / self.scheme_ms if self.scheme_ms > 0 else math.inf

    @property
    def client_advantage(self) -> float:
        """Plaintext baseline time over the client's own blind+verify+recover time."""
        return self.original_compute_ms / self.client_ms if self.client_ms > 0 else math.inf

    @property
    def measured_ratio(self) -> Fraction:
        """Per-column client multiplications (verify) over server multiplications."""
        return Fraction(self.counts["verify"][0], self.counts["server"][0])


def random_input(shape: ConvShape, mode: str, rng: np.random.Generator, bound: int = 2**8) -> np.ndarray:
    """Seeded uniform noise image, integers in [-bound, bound] or floats in [-1, 1)."""
    if mode == "int":
        return rng.integers(-bound, bound + 1, size=shape.input_dims, dtype=np.int64)
    return rng.uniform(-1.0, 1.0, size=shape.input_dims)


def random_kernels(shape: ConvShape, mode: str, rng: np.random.Generator, bound: int = 2**4) -> np.ndarray:
    if mode == "int":
        return rng.integers(-bound, bound + 1, size=shape.weight_dims, dtype=np.int64)
    return rng.uniform(-1.0, 1.0, size=shape.weight_dims)


def _time_ms(fn, *args) -> float:
    t0 = time.perf_counter()
    fn(*args)
    return (time.perf_counter() - t0) * 1e3


def bench_layer(shape: ConvShape, cfg: BenchConfig, seed=None) -> PhaseTimings:
    """Median per-phase timings of ``cfg.repetitions`` sessions on one layer, after a discarded warm-up."""
    rng = np.random.default_rng(seed)
    w = random_kernels(shape, cfg.mode, rng)
    x = random_input(shape, cfg.mode, rng)
    endpoint = cfg.endpoint if cfg.endpoint is not None else ConvServer(w, mode=cfg.mode, seed=seed)
    params = cfg.params()
    client = Client(endpoint, params, rng)
    _kernels.warmup()
    client.infer(x)  # warm-up, also builds the mask pool
    direct_conv_fast(x, w)

    def session(c: Client):
        return c.infer(x)[1]

    if cfg.parallel > 1:
        clients = [Client(endpoint, params, np.random.default_rng([seed or 0, i]), client.masks_for(0, shape.m, shape.n))
                   for i in range(cfg.repetitions)]
        with ThreadPoolExecutor(cfg.parallel) as pool:
            states = list(pool.map(session, clients))
    else:
        states = [session(client) for _ in range(cfg.repetitions)]
    original = [_time_ms(direct_conv_fast, x, w) for _ in range(cfg.repetitions)]
    first = states[0]

    def med(name):
        return statistics.median(s.timings[name] for s in states)

    counts = {phase: (first.counters[phase].sm, first.counters[phase].sa) for phase in ("blind", "verify", "recover")}
    counts["server"] = (first.server_sm, 0)
    return PhaseTimings(
        shape=shape,
        index_size=first.index_size,
        blind_ms=med("blind_ms"),
        verify_ms=med("verify_ms"),
        recover_ms=med("recover_ms"),
        roundtrip_ms=med("roundtrip_ms"),
        server_compute_ms=statistics.median(s.server_compute_ms for s in states),
        original_compute_ms=statistics.median(original),
        counts=counts,
        contended=cfg.parallel > 1,
    )


CSV_FIELDS = ["m", "n", "k", "c_in", "c_out", "count", "index_size", "phase", "ms", "SM", "SA", "contended"]


def timing_rows(rows: list[PhaseTimings]):
    for t in rows:
        base = {**t.shape.as_dict(), "count": t.count, "index_size": t.index_size, "contended": int(t.contended)}
        phases = [
            ("blind", t.blind_ms, t.counts["blind"]),
            ("verify", t.verify_ms, t.counts["verify"]),
            ("recover", t.recover_ms, t.counts["recover"]),
            ("server_compute", t.server_compute_ms, t.counts["server"]),
            ("roundtrip", t.roundtrip_ms, ("", "")),
            ("original_compute", t.original_compute_ms, ("", "")),
        ]
        for phase, ms, (sm, sa) in phases:
            yield {**base, "phase": phase, "ms": f"{ms:.4f}", "SM": sm, "SA": sa}


def write_csv(path, rows: list[PhaseTimings]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(timing_rows(rows))


def run_phase_bench(cfg: BenchConfig, progress=None) -> list[PhaseTimings]:
    """Benchmark every shape in ``cfg.shapes``; partial results reach the CSV even if a layer fails."""
    results: list[PhaseTimings] = []
    try:
        for i, shape in enumerate(cfg.shapes):
            seed = None if cfg.seed is None else [cfg.seed, i]
            results.append(bench_layer(shape, cfg, seed))
            if progress is not None:
                progress(results[-1])
    finally:
        if cfg.csv_path:
            write_csv(cfg.csv_path, results)
    return results


def dedupe(shapes: list[ConvShape]) -> list[tuple[ConvShape, int]]:
    """Distinct shapes in first-seen order with their multiplicities."""
    counts: dict[ConvShape, int] = {}
    for s in shapes:
        counts[s] = counts.get(s, 0) + 1
    return list(counts.items())


def run_model_bench(name: str, cfg: BenchConfig, size: int | None = None, progress=None) -> list[PhaseTimings]:
    """Time each distinct layer of a preset once; ``count`` carries how often it repeats."""
    distinct = dedupe(preset_layers(name, size))
    cfg = BenchConfig(**{**asdict(cfg), "shapes": [s for s, _ in distinct], "csv_path": None})
    results = run_phase_bench(cfg, progress)
    for t, (_, count) in zip(results, distinct):
        t.count = count
    return results


def model_totals(rows: list[PhaseTimings]) -> dict[str, float]:
    """Whole-model milliseconds in the layout of a per-model timing table."""
    total = {key: sum(getattr(t, key) * t.count for t in rows)
             for key in ("blind_ms", "verify_ms", "recover_ms", "roundtrip_ms", "server_compute_ms", "original_compute_ms")}
    total["scheme_ms"] = total["blind_ms"] + total["verify_ms"] + total["recover_ms"] + total["roundtrip_ms"]
    total["speedup"] = total["original_compute_ms"] / total["scheme_ms"]
    total["client_advantage"] = total["original_compute_ms"] / (total["blind_ms"] + total["verify_ms"] + total["recover_ms"])
    return total


def sweep_shapes(axis: str, values, m: int = 32, n: int = 32, k: int = 3, c_in: int = 3, c_out: int = 16) -> list[ConvShape]:
    if axis == "cin":
        return [ConvShape(m, n, k, v, c_out) for v in values]
    if axis == "cout":
        return [ConvShape(m, n, k, c_in, v) for v in values]
    raise ValueError("axis must be 'cin' or 'cout'")


CIN_SWEEP = (3, 50, 100, 150, 200, 250, 300)
COUT_SWEEP = (8, 16, 32, 64, 128, 256)


def format_table(rows: list[PhaseTimings]) -> str:
    head = f"{'shape (m,n,k,cin,cout)':>26} {'x':>3} {'|I|':>3} {'blind':>9} {'verify':>9} {'recover':>9} " \
           f"{'server':>9} {'original':>10} {'client adv':>10} {'speedup':>8} {'ratio':>9}"
    lines = [head, "-" * len(head)]
    for t in rows:
        s = t.shape
        lines.append(
            f"{f'({s.m},{s.n},{s.k},{s.c_in},{s.c_out})':>26} {t.count:>3} {t.index_size:>3} {t.blind_ms:>9.3f} "
            f"{t.verify_ms:>9.3f} {t.recover_ms:>9.3f} {t.server_compute_ms:>9.3f} {t.original_compute_ms:>10.3f} "
            f"{t.client_advantage:>10.2f} {t.speedup:>8.2f} {float(t.measured_ratio):>9.5f}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# detection experiment


@dataclass
class DetectionStats:
    trials: int
    behavior: str
    lambda1: int
    mode: str
    detected: int
    control_trials: int = 0
    false_rejections: int = 0

    def __post_init__(self):
        if not 0 <= self.detected <= self.trials:
            raise ValueError("detected must lie in [0, trials]")

    @property
    def rate(self) -> float:
        return self.detected / self.trials if self.trials else float("nan")

    @property
    def floor(self) -> float:
        """1 - 1/|Z|; only meaningful in exact mode."""
        return 1.0 - 1.0 / (2 * (2**self.lambda1 - 1))

    @property
    def sigma(self) -> float:
        p = 1.0 / (2 * (2**self.lambda1 - 1))
        return math.sqrt(p * (1 - p) / self.trials) if self.trials else float("nan")

    @property
    def threshold(self) -> float:
        return self.floor - 3 * self.sigma

    @property
    def passed(self) -> bool:
        return self.rate >= self.threshold and self.false_rejections == 0

    def row(self) -> dict:
        return {
            "behavior": self.behavior, "mode": self.mode, "lambda1": self.lambda1, "trials": self.trials,
            "detected": self.detected, "rate": f"{self.rate:.6f}", "floor": f"{self.floor:.8f}",
            "threshold": f"{self.threshold:.8f}", "control_trials": self.control_trials,
            "false_rejections": self.false_rejections,
        }


DETECT_SHAPE = ConvShape(m=8, n=8, k=3, c_in=3, c_out=4)


def _run_sessions(client: Client, x, trials: int, parallel: int = 1) -> int:
    """Count how many of ``trials`` sessions fail verification."""
    def one(_):
        try:
            client.infer(x)
        except VerificationFailed:
            return 1
        return 0

    if parallel > 1:
        with ThreadPoolExecutor(parallel) as pool:
            return sum(pool.map(one, range(trials)))
    return sum(one(i) for i in range(trials))


def run_detection_experiment(behavior: ServerBehavior | str, trials: int, shape: ConvShape = DETECT_SHAPE,
                             params: SecurityParams | None = None, seed=0, control_trials: int | None = None,
                             endpoint=None) -> DetectionStats:
    """Run ``trials`` sessions against a cheating server plus an honest control arm.

    Every session draws a fresh key; the mask pool is shared, as in the scheme.
    With ``endpoint`` the cheating arm goes to that server instead of an
    in-process one (its behaviour is whatever it was started with).
    """
    params = params or SecurityParams(lambda1=16)
    if isinstance(behavior, str):
        behavior = ServerBehavior.parse(behavior, params.lambda1)
    control_trials = trials if control_trials is None else control_trials
    seeds = np.random.SeedSequence(seed).spawn(4)
    rng = np.random.default_rng(seeds[0])
    w = random_kernels(shape, params.mode, rng)
    x = random_input(shape, params.mode, rng)

    cheat_server = endpoint if endpoint is not None else ConvServer(w, behavior, params.mode, seeds[1])
    cheat = Client(cheat_server, params, np.random.default_rng(seeds[2]))
    detected = _run_sessions(cheat, x, trials)

    honest = Client(ConvServer(w, ServerBehavior("honest"), params.mode), params, np.random.default_rng(seeds[3]))
    false_rejections = _run_sessions(honest, x, control_trials)
    return DetectionStats(trials, str(behavior), params.lambda1, params.mode, detected, control_trials, false_rejections)


def write_detection_csv(path, stats: list[DetectionStats]):
    rows = [s.row() for s in stats]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
