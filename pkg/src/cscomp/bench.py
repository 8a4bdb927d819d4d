"""Experiment harness: evaluate solvers and trained networks on an off-grid test set.

One test set is drawn per seed and shared by every algorithm and
oversampling factor, so all comparisons are paired. Rows are emitted in the
order ``(algorithm, os, s, gamma, sample_index)`` with the algorithm order
taken from the configuration.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError
from .lamp import LampModel, lamp_forward, load_model
from .model import SensingMatrix, build_sensing_matrix, generate_offgrid_channel
from .postprocess import prune_and_refit
from .solvers import FistaConfig, amp_mmv, fista, lipschitz_estimate, niht, omp_mmv

ALGORITHMS = ("omp", "niht", "fista", "amp_mmv", "lamp")
METRIC_FIELDS = ("algorithm", "os", "s", "gamma", "sample_index", "residual",
                 "nmse_vs_truth", "iterations", "wall_time_ms")
SUMMARY_FIELDS = ("algorithm", "os", "s", "gamma", "count", "residual_mean", "residual_median",
                  "residual_q1", "residual_q3", "nmse_mean", "nmse_median", "iterations_mean",
                  "wall_time_ms_mean")

ModelPaths = Dict[int, Union[str, Dict[float, str]]]


@dataclass
class ExperimentConfig:
    algorithms: List[str]
    os_values: List[int] = field(default_factory=lambda: [1, 2, 4])
    s_values: List[int] = field(default_factory=lambda: [10])
    gamma_values: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    num_samples: int = 500
    p: int = 16
    snr_db: Optional[float] = 20.0
    seed: int = 0
    model_paths: ModelPaths = field(default_factory=dict)
    postprocess: bool = True
    # number of continuous-delay taps in each test channel
    channel_taps: int = 10
    # with timing off wall_time_ms is written as 0 so that reruns are byte-identical
    timing: bool = True
    amp_alpha: float = 1.0
    amp_iters: int = 20
    niht_options: Dict[str, float] = field(default_factory=dict)
    fista_options: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "algorithms" not in data:
            raise ConfigError("configuration must list 'algorithms'")
        data = dict(data)
        paths: ModelPaths = {}
        for key, value in data.get("model_paths", {}).items():
            if isinstance(value, dict):
                paths[int(key)] = {float(g): str(p) for g, p in value.items()}
            else:
                paths[int(key)] = str(value)
        data["model_paths"] = paths
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model_paths"] = {
            str(k): ({str(g): p for g, p in v.items()} if isinstance(v, dict) else v)
            for k, v in self.model_paths.items()
        }
        return out

    def validate(self) -> None:
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"algorithms must be a nonempty subset of {ALGORITHMS}, got {self.algorithms}")
        if not self.os_values or any(int(o) != o or o < 1 for o in self.os_values):
            raise ConfigError("os_values must be positive integers")
        if not self.s_values or any(s < 1 for s in self.s_values):
            raise ConfigError("s_values must be positive integers")
        if self.num_samples < 1 or self.p < 1 or self.channel_taps < 1:
            raise ConfigError("num_samples, p and channel_taps must be positive")
        try:
            FistaConfig(**self.fista_options)
        except TypeError as exc:
            raise ConfigError(f"bad fista_options: {exc}") from exc
        if "lamp" in self.algorithms:
            for path in self.lamp_models_for_all():
                if not Path(path).is_file():
                    raise ConfigError(f"model file not found: {path}")

    def lamp_models(self, os_value: int) -> List[Tuple[Optional[float], str]]:
        """``(gamma, path)`` pairs for one oversampling factor."""
        entry = self.model_paths.get(int(os_value))
        if entry is None:
            raise ConfigError(f"lamp requires a model path for os={os_value}")
        if isinstance(entry, str):
            return [(None, entry)]
        missing = [g for g in self.gamma_values if float(g) not in entry]
        if missing:
            raise ConfigError(f"no model for os={os_value}, gamma={missing}")
        return [(float(g), entry[float(g)]) for g in self.gamma_values]

    def lamp_models_for_all(self) -> List[str]:
        return [p for o in self.os_values for _, p in self.lamp_models(o)]


@dataclass
class MetricRow:
    algorithm: str
    os: int
    s: int
    gamma: Optional[float]
    sample_index: int
    residual: float
    nmse_vs_truth: float
    iterations: int
    wall_time_ms: float

    def as_list(self) -> list:
        return [self.algorithm, self.os, self.s, "" if self.gamma is None else repr(float(self.gamma)),
                self.sample_index, repr(float(self.residual)), repr(float(self.nmse_vs_truth)),
                self.iterations, repr(float(self.wall_time_ms))]


@dataclass
class BenchSample:
    y: np.ndarray
    clean: np.ndarray


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def build_test_set(cfg: ExperimentConfig, f: SensingMatrix) -> List[BenchSample]:
    """Off-grid channels normalized to ``||Y|| = 1``; the clean response is scaled alike."""
    samples = []
    for i in range(cfg.num_samples):
        y, channel = generate_offgrid_channel(cfg.p, cfg.channel_taps, f, cfg.snr_db, sample_seed(cfg.seed, i))
        clean = channel.response(f)
        scale = np.linalg.norm(y)
        samples.append(BenchSample(y / scale, clean / scale))
    return samples


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("CSCOMP_THREADS", "1")))
    except ValueError:
        return 1


def _solve(algorithm: str, f: SensingMatrix, y: np.ndarray, s: int, cfg: ExperimentConfig,
           beta: Optional[float], model: Optional[LampModel]) -> Tuple[np.ndarray, int]:
    if algorithm == "omp":
        r = omp_mmv(f, y, s)
    elif algorithm == "niht":
        r = niht(f, y, s, **cfg.niht_options)
    elif algorithm == "fista":
        r = fista(f, y, FistaConfig(**cfg.fista_options), beta=beta)
    elif algorithm == "amp_mmv":
        r = amp_mmv(f, y, cfg.amp_alpha, cfg.amp_iters)
    else:
        x_hat, _ = lamp_forward(model, y)
        return x_hat, model.T
    return r.estimate, r.iterations


def run_cell(algorithm: str, f: SensingMatrix, s: int, gamma: Optional[float],
             samples: Sequence[BenchSample], cfg: ExperimentConfig,
             beta: Optional[float] = None, model: Optional[LampModel] = None) -> List[MetricRow]:
    def evaluate(index: int) -> MetricRow:
        sample = samples[index]
        start = time.perf_counter()
        estimate, iterations = _solve(algorithm, f, sample.y, s, cfg, beta, model)
        if cfg.postprocess:
            estimate = prune_and_refit(estimate, f, sample.y, s).estimate
        elapsed = (time.perf_counter() - start) * 1e3 if cfg.timing else 0.0
        fx = f.entries @ estimate
        residual = float(np.linalg.norm(sample.y - fx))
        nmse = float(np.linalg.norm(sample.clean - fx) ** 2 / np.linalg.norm(sample.clean) ** 2)
        return MetricRow(algorithm, f.os, s, gamma, index, residual, nmse, iterations, elapsed)

    threads = _thread_count()
    if threads == 1:
        return [evaluate(i) for i in range(len(samples))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(evaluate, range(len(samples))))


def summarize(rows: Sequence[MetricRow]) -> List[dict]:
    """Per-cell statistics in first-appearance order of the cells."""
    cells: Dict[tuple, List[MetricRow]] = {}
    for row in rows:
        cells.setdefault((row.algorithm, row.os, row.s, row.gamma), []).append(row)
    out = []
    for (algorithm, os_value, s, gamma), members in cells.items():
        res = np.array([r.residual for r in members])
        nmse = np.array([r.nmse_vs_truth for r in members])
        q1, median, q3 = np.percentile(res, [25, 50, 75])
        out.append({
            "algorithm": algorithm, "os": os_value, "s": s, "gamma": gamma,
            "count": len(members),
            "residual_mean": float(np.mean(res)), "residual_median": float(median),
            "residual_q1": float(q1), "residual_q3": float(q3),
            "nmse_mean": float(np.mean(nmse)), "nmse_median": float(np.median(nmse)),
            "iterations_mean": float(np.mean([r.iterations for r in members])),
            "wall_time_ms_mean": float(np.mean([r.wall_time_ms for r in members])),
        })
    return out


def run_benchmark(cfg: ExperimentConfig, progress=None) -> Tuple[List[MetricRow], List[dict]]:
    """Evaluate every (algorithm, os, s, gamma) cell on the shared test set.

    ``progress``, if given, is called with a short message per finished cell.
    """
    cfg.validate()
    matrices = {int(o): build_sensing_matrix(int(o)) for o in cfg.os_values}
    models: Dict[int, List[Tuple[Optional[float], LampModel]]] = {}
    if "lamp" in cfg.algorithms:
        for o, f in matrices.items():
            models[o] = [(g, load_model(path, f)) for g, path in cfg.lamp_models(o)]
    samples = build_test_set(cfg, matrices[int(cfg.os_values[0])])
    betas = {o: lipschitz_estimate(f) for o, f in matrices.items()} if "fista" in cfg.algorithms else {}

    rows: List[MetricRow] = []
    for algorithm in cfg.algorithms:
        for o in cfg.os_values:
            f = matrices[int(o)]
            for s in cfg.s_values:
                if algorithm == "lamp":
                    for gamma, model in models[int(o)]:
                        gamma = model.gamma if gamma is None else gamma
                        rows.extend(run_cell(algorithm, f, s, gamma, samples, cfg, model=model))
                else:
                    rows.extend(run_cell(algorithm, f, s, None, samples, cfg, beta=betas.get(int(o))))
                if progress is not None:
                    progress(f"{algorithm} os={o} s={s} done")
    return rows, summarize(rows)


def metrics_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow(row.as_list())
    return buf.getvalue()


def summary_csv(summary: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_FIELDS)
    for cell in summary:
        writer.writerow(["" if cell[k] is None else (repr(cell[k]) if isinstance(cell[k], float) else cell[k])
                         for k in SUMMARY_FIELDS])
    return buf.getvalue()


def write_results(rows: Sequence[MetricRow], summary: Sequence[dict], out_path) -> Path:
    """Write the per-sample CSV to ``out_path`` and the summary next to it; returns the summary path."""
    out_path = Path(out_path)
    out_path.write_text(metrics_csv(rows))
    summary_path = out_path.with_name(out_path.stem + ".summary.csv")
    summary_path.write_text(summary_csv(summary))
    return summary_path
