"""Monte-Carlo SER sweeps, oracle suites and experiment configuration.

Config files are flat ``key = value`` text, one key per line, ``#`` starts a
comment. Sequences (``detectors``, ``snr_db``) are comma separated. The
environment variable ``NEURODETECT_SEED`` overrides ``master_seed``.
"""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import channels as chn
from . import detect_ml as dml
from . import detect_model as dmod
from . import nn

FINITE_FAMILIES = ("isi-awgn", "isi-poisson")
MIMO_FAMILIES = ("mimo-awgn", "mimo-poisson")
FINITE_DETECTORS = ("viterbi", "bcjr", "viterbinet", "bcjrnet")
MIMO_DETECTORS = ("map", "sic", "deepsic-e2e", "deepsic-seq")

# paper-scale Monte-Carlo budgets; desk defaults use half
PAPER_N_TEST = {"finite": 50000, "mimo": 20000}

CSV_HEADER = ("detector", "snr_db", "ser", "stderr", "n_symbols", "n_errors", "seed")

# RNG stream purposes
_TRAIN, _TEST, _CSI, _INIT = 1, 2, 3, 4


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "isi-awgn"
    detectors: tuple[str, ...] = FINITE_DETECTORS
    snr_db: tuple[float, ...] = (-6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    n_train: int = 5000
    n_test: int | None = None
    """Test symbols (finite memory) or channel uses (MIMO) per realization and SNR."""
    n_channels: int = 20
    gamma_min: float = 0.1
    gamma_max: float = 2.0
    memory: int = 4
    sigma_e2: float = 0.0
    Q: int = 5
    K: int = 6
    n_r: int = 6
    master_seed: int = 0
    output: str = "ser.csv"
    block_length: int = 1000
    learning_rate: float = 0.01
    max_epochs: int = 100
    batch_size: int = 27
    viterbi_mode: str = "traceback"
    sic_poisson_model: str = "nominal"
    e2e_stop_gradient: bool = False
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "detectors", tuple(self.detectors))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        self.validate()

    @property
    def is_mimo(self) -> bool:
        return self.family in MIMO_FAMILIES

    @property
    def kind(self) -> str:
        return "awgn" if self.family.endswith("awgn") else "poisson"

    @property
    def test_budget(self) -> int:
        if self.n_test is not None:
            return self.n_test
        return PAPER_N_TEST["mimo" if self.is_mimo else "finite"] // 2

    def gammas(self) -> np.ndarray:
        """Channel-decay grid, equally spaced over ``[gamma_min, gamma_max]`` inclusive."""
        return np.linspace(self.gamma_min, self.gamma_max, self.n_channels)

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(self.learning_rate, self.max_epochs, self.batch_size, seed=seed)

    def validate(self):
        def bad(name, why):
            raise ValueError(f"invalid config field {name!r}: {why}")

        if self.family not in FINITE_FAMILIES + MIMO_FAMILIES:
            bad("family", f"unknown family {self.family!r}")
        allowed = MIMO_DETECTORS if self.is_mimo else FINITE_DETECTORS
        if not self.detectors:
            bad("detectors", "empty detector list")
        for d in self.detectors:
            if d not in allowed:
                bad("detectors", f"{d!r} not available for {self.family}")
        if not self.snr_db:
            bad("snr_db", "empty SNR grid")
        if self.n_test is not None and self.n_test < 1:
            bad("n_test", "must be >= 1")
        if self.n_train < 1:
            bad("n_train", "must be >= 1")
        if self.n_channels < 1:
            bad("n_channels", "must be >= 1")
        if self.memory < 1:
            bad("memory", "must be >= 1")
        if self.sigma_e2 < 0:
            bad("sigma_e2", "must be >= 0")
        if self.Q < 1:
            bad("Q", "must be >= 1")
        if self.K < 1 or self.n_r < 1:
            bad("K" if self.K < 1 else "n_r", "must be >= 1")
        if self.block_length <= self.memory:
            bad("block_length", "must exceed the memory length")
        if self.viterbi_mode not in ("traceback", "sequential"):
            bad("viterbi_mode", "must be traceback or sequential")
        if self.sic_poisson_model not in ("nominal", "mean-matched"):
            bad("sic_poisson_model", "must be nominal or mean-matched")
        if self.workers < 1:
            bad("workers", "must be >= 1")


_TUPLE_FIELDS = {"detectors": str, "snr_db": float}


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    if name in _TUPLE_FIELDS:
        return tuple(_TUPLE_FIELDS[name](v.strip()) for v in raw.split(",") if v.strip())
    if name == "n_test":
        return None if raw.lower() in ("", "none") else int(raw)
    if ftype == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def parse_config(text: str, **overrides) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"invalid config field {key!r} (line {lineno})")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ValueError(f"invalid config field {key!r}: {exc}") from None
    family = values.get("family", ExperimentConfig.family)
    if "detectors" not in values and family in MIMO_FAMILIES:
        values["detectors"] = MIMO_DETECTORS
    env_seed = os.environ.get("NEURODETECT_SEED")
    if env_seed is not None:
        values["master_seed"] = int(env_seed)
    values.update(overrides)
    return ExperimentConfig(**values)


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ", ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


# -- metrics -------------------------------------------------------------------


def ser(decided, truth) -> float:
    """Fraction of positions where ``decided`` differs from ``truth``."""
    decided, truth = np.asarray(decided), np.asarray(truth)
    if decided.shape != truth.shape:
        raise ValueError(f"shape mismatch {decided.shape} vs {truth.shape}")
    if decided.size == 0:
        raise ValueError("need at least one symbol")
    return float(np.mean(decided != truth))


def ser_stderr(p: float, n: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / n))


@dataclass(frozen=True)
class SerRow:
    detector: str
    snr_db: float
    ser: float
    stderr: float
    n_symbols: int
    n_errors: int
    seed: int

    def csv_fields(self) -> list[str]:
        return [
            self.detector,
            f"{self.snr_db:g}",
            f"{self.ser:.10g}",
            f"{self.stderr:.10g}",
            str(self.n_symbols),
            str(self.n_errors),
            str(self.seed),
        ]


@dataclass
class SerCurve:
    rows: list[SerRow] = field(default_factory=list)

    def get(self, detector: str, snr_db: float) -> SerRow:
        for r in self.rows:
            if r.detector == detector and r.snr_db == snr_db:
                return r
        raise KeyError((detector, snr_db))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> SerCurve:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            return cls(
                [
                    SerRow(
                        r["detector"],
                        float(r["snr_db"]),
                        float(r["ser"]),
                        float(r["stderr"]),
                        int(r["n_symbols"]),
                        int(r["n_errors"]),
                        int(r["seed"]),
                    )
                    for r in reader
                ]
            )


# -- sweep -------------------------------------------------------------------


def _task_seed(master_seed: int, *key: int) -> int:
    seq = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def _block_sizes(total: int, block: int, minimum: int) -> list[int]:
    sizes = [block] * (total // block)
    rest = total - block * len(sizes)
    if rest:
        if rest > minimum:
            sizes.append(rest)
        elif sizes:
            sizes[-1] += rest
        else:
            raise ValueError(f"n_test={total} must exceed the memory length")
    return sizes


def _finite_task(cfg: ExperimentConfig, r: int, j: int) -> dict[str, int]:
    root = chn.RngStream(cfg.master_seed, (r, j))
    gamma = cfg.gammas()[r]
    h = chn.make_decay_vector(gamma, cfg.memory)
    true_ch = chn.FiniteMemoryChannel(cfg.kind, h, 10 ** (cfg.snr_db[j] / 10))
    clip = cfg.kind == "poisson"

    def perturb(taps, gen):
        out = taps + np.sqrt(cfg.sigma_e2) * gen.standard_normal(taps.shape)
        return np.maximum(out, 0.0) if clip else out

    sampler = None
    model_ch = true_ch
    if cfg.sigma_e2 > 0:
        model_ch = true_ch.with_taps(perturb(h, root.child(_CSI).generator()))
        sampler = lambda gen, n: perturb(np.broadcast_to(h, (n, h.size)), gen)

    learned = {"viterbinet", "bcjrnet"} & set(cfg.detectors)
    model = None
    if learned:
        train = chn.generate_dataset(true_ch, cfg.n_train, root.child(_TRAIN), taps_sampler=sampler)
        model = dml.train_likelihood_model(
            train, true_ch.l, true_ch.m, cfg.train_config(_task_seed(cfg.master_seed, r, j, _INIT))
        )

    errors = dict.fromkeys(cfg.detectors, 0)
    cost = dmod.exact_cost(model_ch)
    node = dmod.exact_function_node(model_ch)
    for b, size in enumerate(_block_sizes(cfg.test_budget, cfg.block_length, cfg.memory)):
        test = chn.generate_dataset(true_ch, size, root.child(_TEST, b))
        y, truth = test.observations, test.labels[:, 0]
        for det in cfg.detectors:
            if det == "viterbi":
                d = dmod.viterbi(y, cost, true_ch.l, true_ch.m, cfg.viterbi_mode)
            elif det == "bcjr":
                d = np.argmax(dmod.bcjr(y, node, true_ch.l, true_ch.m), axis=1)
            elif det == "viterbinet":
                d = dml.viterbinet_detect(model, y, cfg.viterbi_mode)
            else:
                d = dml.bcjrnet_detect(model, y)
            errors[det] += int(np.sum(d != truth))
    return errors


def sic_inputs(ch: chn.MimoChannel, Y, H, how: str = "nominal"):
    """Observation, matrix and noise variance handed to model-based SIC.

    The AWGN channel is used as is. For the Poisson channel, ``nominal``
    applies the linear-Gaussian algorithm to the raw counts with the
    channel's own ``(H, sigma_w2)``; ``mean-matched`` removes the unit dark
    rate, scales ``H`` by ``1/sqrt(sigma_w2)`` and uses the average rate as
    noise variance.
    """
    if ch.kind == "awgn" or how == "nominal":
        return Y, H, ch.sigma_w2
    H_eff = np.asarray(H) / np.sqrt(ch.sigma_w2)
    mean_rate = 1.0 + float((H_eff @ np.full(ch.K, ch.constellation.values.mean())).mean())
    return np.asarray(Y) - 1.0, H_eff, max(mean_rate, 1e-12)


def _mimo_task(cfg: ExperimentConfig, r: int, j: int) -> dict[str, int]:
    root = chn.RngStream(cfg.master_seed, (r, j))
    H = chn.spatial_decay_matrix(cfg.n_r, cfg.K)
    true_ch = chn.MimoChannel(cfg.kind, H, 10 ** (-cfg.snr_db[j] / 10))
    H_model = H
    sampler = None
    if cfg.sigma_e2 > 0:
        H_model = chn.perturb_csi_mimo(H, cfg.sigma_e2, root.child(_CSI))
        scale = np.sqrt(cfg.sigma_e2 * np.abs(H))
        sampler = lambda gen, n: H + scale * gen.standard_normal((n, *H.shape))

    nets = {}
    train = None
    for det in ("deepsic-e2e", "deepsic-seq"):
        if det not in cfg.detectors:
            continue
        if train is None:
            train = chn.generate_dataset(true_ch, cfg.n_train, root.child(_TRAIN), taps_sampler=sampler)
        seed = _task_seed(cfg.master_seed, r, j, _INIT)
        if det == "deepsic-e2e":
            spec = dml.deepsic_e2e_spec(cfg.n_r, cfg.K, true_ch.m)
            net = dml.init_deepsic(spec, cfg.K, cfg.Q, true_ch.m, cfg.n_r, seed)
            nets[det] = dml.deepsic_train_e2e(net, train, cfg.train_config(seed), cfg.e2e_stop_gradient)
        else:
            spec = dml.deepsic_seq_spec(cfg.n_r, cfg.K, true_ch.m)
            net = dml.init_deepsic(spec, cfg.K, cfg.Q, true_ch.m, cfg.n_r, seed)
            nets[det] = dml.deepsic_train_seq(net, train, cfg.train_config(seed))

    errors = dict.fromkeys(cfg.detectors, 0)
    for b, size in enumerate(_block_sizes(cfg.test_budget, cfg.block_length, 0)):
        test = chn.generate_dataset(true_ch, size, root.child(_TEST, b))
        Y, truth = test.observations, test.labels
        for det in cfg.detectors:
            if det == "map":
                d = dmod.map_mimo(true_ch, Y, H_model)
            elif det == "sic":
                y_in, H_in, s2 = sic_inputs(true_ch, Y, H_model, cfg.sic_poisson_model)
                d = dmod.iterative_sic(y_in, H_in, s2, cfg.Q, true_ch.constellation)
            else:
                d = dml.deepsic_detect(nets[det], Y)
            errors[det] += int(np.sum(d != truth))
    return errors


def _run_task(args):
    cfg, r, j = args
    return (_mimo_task if cfg.is_mimo else _finite_task)(cfg, r, j)


def run_sweep(cfg: ExperimentConfig, out=None) -> SerCurve:
    """SER of every detector at every SNR, aggregated over channel realizations.

    Finite-memory families average over ``n_channels`` decay profiles; MIMO
    families use the single spatial-decay matrix. Each (realization, SNR)
    task draws training, test and CSI noise from disjoint RNG streams, so the
    result is independent of ``workers`` and of task completion order. When
    ``out`` is given the CSV and a companion plot script are written.
    """
    n_real = 1 if cfg.is_mimo else cfg.n_channels
    tasks = [(cfg, r, j) for r in range(n_real) for j in range(len(cfg.snr_db))]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]

    per_symbol = cfg.K if cfg.is_mimo else 1
    n_symbols = cfg.test_budget * per_symbol * n_real
    curve = SerCurve()
    for det in cfg.detectors:
        for j, snr in enumerate(cfg.snr_db):
            errs = sum(res[det] for (_, _, jj), res in zip(tasks, results) if jj == j)
            p = errs / n_symbols
            curve.rows.append(SerRow(det, snr, p, ser_stderr(p, n_symbols), n_symbols, errs, cfg.master_seed))
    if out is not None:
        curve.write(out)
        write_plot_script(out, cfg)
    return curve


def write_plot_script(csv_path, cfg: ExperimentConfig):
    """Companion matplotlib script that renders ``csv_path`` (run out of process)."""
    csv_path = Path(csv_path)
    script = f'''"""SER vs SNR for {csv_path.name}.

Sweep settings:
{format_config(cfg)}"""
import csv
from collections import defaultdict

import matplotlib.pyplot as plt

curves = defaultdict(list)
with open({str(csv_path.name)!r}) as f:
    for row in csv.DictReader(f):
        curves[row["detector"]].append((float(row["snr_db"]), float(row["ser"])))

for name, pts in curves.items():
    pts.sort()
    plt.semilogy([p[0] for p in pts], [max(p[1], 1e-7) for p in pts], marker="o", label=name)
plt.xlabel("SNR [dB]")
plt.ylabel("SER")
plt.grid(True, which="both", alpha=0.3)
plt.legend()
plt.savefig({str(csv_path.with_suffix(".png").name)!r}, dpi=150)
'''
    Path(str(csv_path) + ".plot.py").write_text(script)


# -- oracle suites ---------------------------------------------------------------

ORACLE_SUITES = ("viterbi-exhaustive", "bcjr-marginals", "sic-map", "plugin-consistency")


@dataclass
class OracleReport:
    suite: str
    passed: bool
    max_deviation: float
    detail: str

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.suite}: {self.detail} (max deviation {self.max_deviation:.3g})"


def _viterbi_suite(n, seed):
    rng = np.random.default_rng(seed)
    matches = 0
    for i in range(n):
        l, t, m = 1 + i % 3, 6, 2
        table = rng.uniform(0, 5, size=(t, m**l))
        got = dmod.viterbi(np.zeros(t), lambda y, tb=table: tb, l, m)
        matches += int(np.array_equal(got, dmod.exhaustive_sequence(table, l, m)))
    return OracleReport("viterbi-exhaustive", matches == n, float(n - matches), f"{matches}/{n} exact matches")


def _bcjr_suite(n, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        l, t, m = 1 + i % 3, 6, 2
        table = rng.normal(0, 2, size=(t, m**l))
        node = dmod.FunctionNode(lambda y, tb=table: tb, l, m)
        got = dmod.bcjr(np.zeros(t), node, l, m)
        worst = max(worst, float(np.abs(got - dmod.exhaustive_marginals(table, l, m)).max()))
    return OracleReport("bcjr-marginals", worst <= 1e-9, worst, f"{n} instances, tolerance 1e-9")


def _sic_suite(n, seed):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        # K = 1: SIC is the exact scalar posterior
        h = rng.normal(size=(3, 1))
        c1 = chn.MimoChannel("awgn", h, rng.uniform(0.1, 2.0))
        y = chn.mimo_emit(c1, [chn.BPSK.values[rng.integers(2)]], rng)
        mismatches += int(not np.array_equal(dmod.iterative_sic(y, h, c1.sigma_w2, 2, chn.BPSK), dmod.map_mimo(c1, y)[0]))
        # K = 2 with orthogonal columns: users decouple
        q, _ = np.linalg.qr(rng.normal(size=(3, 2)))
        c2 = chn.MimoChannel("awgn", q, rng.uniform(0.1, 2.0))
        s = chn.BPSK.values[rng.integers(0, 2, size=2)]
        y = chn.mimo_emit(c2, s, rng)
        sic = dmod.iterative_sic(y, q, c2.sigma_w2, 3, chn.BPSK)
        mismatches += int(not np.array_equal(sic, dmod.map_mimo(c2, y)[0]))
    return OracleReport("sic-map", mismatches == 0, float(mismatches), f"{2 * n} instances with K <= 2")


def _plugin_suite(n_blocks, seed):
    ch = chn.FiniteMemoryChannel("awgn", chn.make_decay_vector(0.5, 4), 4.0)
    model = dml.AnalyticLikelihoodModel(ch)
    exact, learned = dmod.exact_cost(ch), dml.learned_cost(model)
    mismatches, worst = 0, 0.0
    for b in range(n_blocks):
        y = chn.generate_dataset(ch, 1000, chn.RngStream(seed, b)).observations
        worst = max(worst, float(np.abs(exact(y) - learned(y)).max()))
        mismatches += int(np.sum(dmod.viterbi(y, exact, 4, 2) != dml.viterbinet_detect(model, y)))
        ref = np.argmax(dmod.bcjr(y, dmod.exact_function_node(ch), 4, 2), axis=1)
        mismatches += int(np.sum(ref != dml.bcjrnet_detect(model, y)))
    ok = mismatches == 0 and worst <= 1e-9
    return OracleReport(
        "plugin-consistency", ok, worst, f"{mismatches} decision mismatches over {1000 * n_blocks} symbols"
    )


def oracle_check(suite: str, n_instances: int = 100, seed: int = 0) -> OracleReport:
    """Run one brute-force equivalence suite (see ``ORACLE_SUITES``)."""
    if suite == "viterbi-exhaustive":
        return _viterbi_suite(n_instances, seed)
    if suite == "bcjr-marginals":
        return _bcjr_suite(n_instances, seed)
    if suite == "sic-map":
        return _sic_suite(n_instances, seed)
    if suite == "plugin-consistency":
        return _plugin_suite(n_instances, seed)
    raise ValueError(f"unknown oracle suite {suite!r}; choose from {', '.join(ORACLE_SUITES)}")


# -- single-model training for the CLI ---------------------------------------------


def train_from_config(cfg: ExperimentConfig):
    """Train the first data-driven detector of ``cfg`` at its first SNR and realization."""
    root = chn.RngStream(cfg.master_seed, (0, 0))
    seed = _task_seed(cfg.master_seed, 0, 0, _INIT)
    if not cfg.is_mimo:
        h = chn.make_decay_vector(cfg.gammas()[0], cfg.memory)
        ch = chn.FiniteMemoryChannel(cfg.kind, h, 10 ** (cfg.snr_db[0] / 10))
        train = chn.generate_dataset(ch, cfg.n_train, root.child(_TRAIN))
        return dml.train_likelihood_model(train, ch.l, ch.m, cfg.train_config(seed))
    H = chn.spatial_decay_matrix(cfg.n_r, cfg.K)
    ch = chn.MimoChannel(cfg.kind, H, 10 ** (-cfg.snr_db[0] / 10))
    train = chn.generate_dataset(ch, cfg.n_train, root.child(_TRAIN))
    if "deepsic-e2e" in cfg.detectors and "deepsic-seq" not in cfg.detectors:
        net = dml.init_deepsic(dml.deepsic_e2e_spec(cfg.n_r, cfg.K, ch.m), cfg.K, cfg.Q, ch.m, cfg.n_r, seed)
        return dml.deepsic_train_e2e(net, train, cfg.train_config(seed), cfg.e2e_stop_gradient)
    net = dml.init_deepsic(dml.deepsic_seq_spec(cfg.n_r, cfg.K, ch.m), cfg.K, cfg.Q, ch.m, cfg.n_r, seed)
    return dml.deepsic_train_seq(net, train, cfg.train_config(seed))


def with_overrides(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
