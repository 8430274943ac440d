"""Experiment driver: configuration, per-round CSV logs, summaries and sweeps.

A run writes three files into its output directory:

``rounds.csv``
    one row per round, columns :data:`CSV_HEADER`; optional values are
    empty cells, floats use ``repr`` so they read back exactly.
``summary.json``
    the :class:`Summary` plus run metadata.
``config.json``
    the fully resolved :class:`ExperimentConfig`.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _backend
from .client import LocalConfig
from .data import CsvSchema, FederatedDataset, generate_synthetic, load_csv, partition_dirichlet
from .errors import UsageError
from .model import ModelSpec
from .server import RoundRecord, ServerConfig, Simulation, SwaConfig, WimaConfig

log = logging.getLogger(__name__)

CSV_HEADER = (
    "round",
    "sampled_clients",
    "mean_local_loss",
    "acc_fedavg",
    "acc_wima",
    "acc_swa",
    "identity_residual",
)
AXES = ("window_size", "participation", "swa_start", "alpha")
DEFAULT_REPLICATES = 3


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 10
    samples_per_class: int = 100
    class_separation: float = 3.0
    path: str | None = None
    has_header: bool = True

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise UsageError("dataset.kind must be 'synthetic' or 'csv'")
        if self.kind == "csv" and not self.path:
            raise UsageError("dataset.path is required for csv datasets")


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int = 10
    alpha: float = 0.0
    test_fraction: float = 0.2


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic"
    hidden_dim: int = 0
    activation: str = "relu"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    server: ServerConfig = field(default_factory=lambda: ServerConfig(rounds=100, clients_per_round=1))
    seed: int = 0
    eval_every: int = 1
    output_dir: str | None = None
    audit_identity: bool = False
    tail: int = 100
    smoothness_window: int = 50
    workers: int = 1

    def __post_init__(self):
        if self.eval_every < 1:
            raise UsageError("eval_every must be >= 1")
        if self.tail < 1 or self.smoothness_window < 1:
            raise UsageError("tail and smoothness_window must be >= 1")
        if self.seed < 0:
            raise UsageError("seed must be non-negative")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_server(self, **changes) -> "ExperimentConfig":
        return self.replace(server=dataclasses.replace(self.server, **changes))

    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["server"].pop("seed")  # derived from the top-level seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            server = dict(d.pop("server", {}))
            if "seed" in server:
                raise UsageError("set the top-level 'seed'; server.seed is derived from it")
            wima = server.pop("wima", None)
            swa = server.pop("swa", None)
            if wima is not None:
                wima = WimaConfig(**wima)
            if swa is not None:
                swa = SwaConfig(**swa)
            return cls(
                dataset=DatasetConfig(**d.pop("dataset", {})),
                partition=PartitionConfig(**d.pop("partition", {})),
                model=ModelConfig(**d.pop("model", {})),
                local=LocalConfig(**d.pop("local", {})),
                server=ServerConfig(wima=wima, swa=swa, **server),
                **d,
            )
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from None


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(raw)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts (sha256 of their repr)."""
    digest = hashlib.sha256(repr(tuple(parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def build_federated_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    dc = cfg.dataset
    if dc.kind == "synthetic":
        ds = generate_synthetic(
            dc.num_classes, dc.input_dim, dc.samples_per_class, dc.class_separation,
            derive_seed(cfg.seed, "dataset"),
        )
    else:
        ds = load_csv(dc.path, CsvSchema(has_header=dc.has_header, num_classes=dc.num_classes))
    pc = cfg.partition
    return partition_dirichlet(ds, pc.num_clients, pc.alpha, derive_seed(cfg.seed, "partition"),
                               pc.test_fraction)


def build_simulation(cfg: ExperimentConfig, fed: FederatedDataset | None = None) -> Simulation:
    fed = fed if fed is not None else build_federated_dataset(cfg)
    x = fed.clients[0].data
    spec = ModelSpec(cfg.model.kind, x.input_dim, x.num_classes, cfg.model.hidden_dim,
                     cfg.model.activation)
    server = dataclasses.replace(cfg.server, seed=derive_seed(cfg.seed, "server"))
    return Simulation(spec, fed, cfg.local, server, audit_identity=cfg.audit_identity,
                      workers=cfg.workers)


# metrics ----------------------------------------------------------------


def final_score(accuracies: Sequence[float], tail: int = 100) -> float:
    """Mean of the last ``tail`` accuracies."""
    if tail < 1:
        raise UsageError("tail must be >= 1")
    if len(accuracies) < tail:
        raise UsageError(f"need {tail} evaluated rounds, have {len(accuracies)}")
    return math.fsum(accuracies[len(accuracies) - tail:]) / tail


def smoothness(accuracies: Sequence[float], window: int = 50) -> float:
    """Mean rolling (population) standard deviation of an accuracy curve.

    Curves shorter than ``window`` are treated as a single window.
    """
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        return 0.0
    if a.size < window:
        return float(a.std())
    return float(np.lib.stride_tricks.sliding_window_view(a, window).std(axis=1).mean())


@dataclass(frozen=True)
class Summary:
    rounds: int
    evaluated_rounds: int
    tail: int
    final_score_fedavg: float
    smoothness_fedavg: float
    final_score_wima: float | None = None
    smoothness_wima: float | None = None
    final_score_swa: float | None = None
    smoothness_swa: float | None = None
    max_identity_residual: float | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def summarize(records: Sequence[RoundRecord], tail: int = 100, window: int = 50) -> Summary:
    if not records:
        raise UsageError("cannot summarise a run with zero rounds")
    evaluated = [r for r in records if r.acc_fedavg is not None]
    if not evaluated:
        raise UsageError("no evaluated rounds to summarise")
    k = min(tail, len(evaluated))

    def series(name):
        return [getattr(r, name) for r in evaluated if getattr(r, name) is not None]

    def score(s):
        return final_score(s, min(k, len(s))) if s else None

    def smooth(s):
        return smoothness(s, window) if s else None

    f, w, s = series("acc_fedavg"), series("acc_wima"), series("acc_swa")
    residuals = [r.identity_residual for r in records if r.identity_residual is not None]
    return Summary(
        rounds=len(records),
        evaluated_rounds=len(evaluated),
        tail=k,
        final_score_fedavg=score(f),
        smoothness_fedavg=smooth(f),
        final_score_wima=score(w),
        smoothness_wima=smooth(w),
        final_score_swa=score(s),
        smoothness_swa=smooth(s),
        max_identity_residual=max(residuals) if residuals else None,
    )


# CSV --------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_row(r: RoundRecord) -> list[str]:
    return [
        str(r.round),
        ";".join(str(c) for c in r.sampled_clients),
        _cell(r.mean_local_loss),
        _cell(r.acc_fedavg),
        _cell(r.acc_wima),
        _cell(r.acc_swa),
        _cell(r.identity_residual),
    ]


def read_records(path: str | Path) -> list[RoundRecord]:
    def opt(s):
        return float(s) if s != "" else None

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise UsageError(f"{path}: unexpected header {header}")
        out = []
        for row in reader:
            clients = tuple(int(c) for c in row[1].split(";")) if row[1] else ()
            out.append(RoundRecord(int(row[0]), clients, float(row[2]), opt(row[3]), opt(row[4]),
                                   opt(row[5]), opt(row[6])))
    return out


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def run_metadata() -> dict:
    return {
        "kernel_backend": _backend.BACKEND,
        "scaffold_control_variate": "option II",
        "swa_schedule": "schedule-free (no cyclic learning rate)",
        "wima": "shadow model, never broadcast; partial-window warmup",
    }


# running ----------------------------------------------------------------


def iter_rounds(sim: Simulation, cfg: ExperimentConfig) -> Iterable[RoundRecord]:
    while sim.round < sim.cfg.rounds:
        t = sim.round
        evaluate = (t + 1) % cfg.eval_every == 0 or t + 1 == sim.cfg.rounds
        yield sim.run_round(evaluate=evaluate)


def run_experiment(
    cfg: ExperimentConfig, output_dir: str | Path | None = None
) -> tuple[list[RoundRecord], Summary]:
    """Run all rounds; if an output directory is given, stream the CSV and write the summary."""
    out = Path(output_dir) if output_dir is not None else (
        Path(cfg.output_dir) if cfg.output_dir else None
    )
    sim = build_simulation(cfg)
    records: list[RoundRecord] = []
    if out is None:
        records.extend(iter_rounds(sim, cfg))
    else:
        out.mkdir(parents=True, exist_ok=True)
        resolved = cfg.to_dict()
        resolved["output_dir"] = str(out)
        _write_json_atomic(out / "config.json", resolved)
        with open(out / "rounds.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            fh.flush()
            for rec in iter_rounds(sim, cfg):
                records.append(rec)
                writer.writerow(record_row(rec))
                fh.flush()
    summary = summarize(records, cfg.tail, cfg.smoothness_window)
    if out is not None:
        _write_json_atomic(out / "summary.json", {"summary": summary.to_dict(), "metadata": run_metadata()})
    return records, summary


def summary_from_csv(path: str | Path, tail: int = 100, window: int = 50) -> Summary:
    return summarize(read_records(path), tail, window)


# sweeps -----------------------------------------------------------------


def apply_axis(base: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    s = base.server
    if axis == "window_size":
        W = int(value)
        mask = s.wima.mask if s.wima is not None else "all"
        return base.with_server(wima=WimaConfig(W, mask))
    if axis == "participation":
        frac = float(value)
        if not 0.0 < frac <= 1.0:
            raise UsageError(f"participation must lie in (0, 1], got {value}")
        m = max(1, int(round(frac * base.partition.num_clients)))
        return base.with_server(clients_per_round=m)
    if axis == "swa_start":
        v = float(value)
        start = int(round(v * s.rounds)) if 0.0 < v < 1.0 else int(v)
        cycle = s.swa.cycle if s.swa is not None else 1
        return base.with_server(swa=SwaConfig(start, cycle))
    if axis == "alpha":
        return base.replace(partition=dataclasses.replace(base.partition, alpha=float(value)))
    raise UsageError(f"unknown sweep axis {axis!r}; choose from {AXES}")


@dataclass(frozen=True)
class SweepCell:
    axis_value: float
    replicate: int
    seed: int
    summary: Summary


def _run_cell(args):
    cfg, out = args
    return run_experiment(cfg, out)[1]


def sweep(
    base: ExperimentConfig,
    axis: str,
    values: Sequence,
    replicates: int = DEFAULT_REPLICATES,
    output_dir: str | Path | None = None,
    workers: int = 1,
) -> tuple[list[SweepCell], dict]:
    """One run per (value, replicate) with seed ``derive_seed(base.seed, value, replicate)``.

    Returns every cell plus per-value means of the summary scores.
    """
    if axis not in AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    if not values:
        raise UsageError("sweep needs at least one value")
    if replicates < 1:
        raise UsageError("replicates must be >= 1")
    out = Path(output_dir) if output_dir is not None else None
    jobs, keys = [], []
    for value in values:
        axis_cfg = apply_axis(base, axis, value)
        for rep in range(replicates):
            seed = derive_seed(base.seed, value, rep)
            cell_out = out / f"{axis}={value}" / f"rep{rep}" if out is not None else None
            jobs.append((axis_cfg.replace(seed=seed, output_dir=None), cell_out))
            keys.append((value, rep, seed))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            summaries = list(pool.map(_run_cell, jobs))
    else:
        summaries = [_run_cell(j) for j in jobs]
    cells = [SweepCell(v, r, s, summ) for (v, r, s), summ in zip(keys, summaries)]
    means = {}
    for value in values:
        group = [c.summary for c in cells if c.axis_value == value]
        row = {}
        for name in ("final_score_fedavg", "final_score_wima", "final_score_swa",
                     "smoothness_fedavg", "smoothness_wima"):
            vals = [getattr(g, name) for g in group if getattr(g, name) is not None]
            row[name] = float(np.mean(vals)) if vals else None
        means[str(value)] = row
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            fields = [f.name for f in dataclasses.fields(Summary)]
            w.writerow(["axis", "axis_value", "replicate", "seed", *fields])
            for c in cells:
                w.writerow([axis, c.axis_value, c.replicate, c.seed,
                            *(_cell(getattr(c.summary, f)) for f in fields)])
        _write_json_atomic(out / "sweep_summary.json", {"axis": axis, "means": means,
                                                        "metadata": run_metadata()})
    return cells, means
