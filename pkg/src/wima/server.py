"""Server side of the simulation: sampling, aggregation and shadow averages.

The trained global model follows the FedOpt recursion

    w^{t+1} = w^t - server_lr * sum_i (N_i / N) (w^t - w_i^t)

(or its momentum variant). Two *shadow* models are derived from that
trajectory without ever being sent back to clients:

* the window average of the last ``W`` global models (WIMA);
* a stochastic weight average of models collected every ``cycle`` rounds
  from ``start_round`` on (SWA, without a cyclic learning rate).

Expanding the window average in terms of the pseudo-gradients gives

    mean(w^{t'+1} .. w^{t'+W}) = w^{t'} - server_lr * sum_{k=0}^{W-1} ((W - k) / W) * dw^{t'+k}

where ``t'`` is the first round in the window and ``w^{t'}`` the global model
*before* that round. :func:`decay_form_reconstruct` evaluates the right-hand
side from a :class:`PseudoGradientLog`, giving an independent check of the
window average.
"""

from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import ClientState, LocalConfig, LocalResult, local_train
from .data import FederatedDataset
from .errors import DataFormatError, NumericDivergenceError, UsageError
from .model import ModelSpec, accuracy, init_params
from .paramvec import (
    CLASSIFIER,
    FEATURE_EXTRACTOR,
    ParamLayout,
    ParamVector,
    SegmentMask,
    axpy,
    masked_blend,
    weighted_mean,
)

AGGREGATORS = ("fedavg", "fedavgm", "scaffold")
RECOMPUTE_EVERY = 1000

_TAG_SAMPLE = 0
_TAG_CLIENT = 1


@dataclass(frozen=True)
class WimaConfig:
    window: int = 100
    # "all", "classifier", "feature_extractor", "none", or explicit segment names
    mask: str | tuple[str, ...] = "all"

    def __post_init__(self):
        if self.window < 1:
            raise UsageError("WIMA window must be >= 1")
        if not isinstance(self.mask, str):
            object.__setattr__(self, "mask", tuple(self.mask))

    def resolve_mask(self, layout: ParamLayout) -> SegmentMask:
        if self.mask == "all":
            m = SegmentMask.all(layout)
        elif self.mask == "none":
            m = SegmentMask.none()
        elif self.mask in (CLASSIFIER, FEATURE_EXTRACTOR):
            m = SegmentMask.by_role(layout, self.mask)
        else:
            m = SegmentMask(self.mask)
        m.validate(layout)
        return m


@dataclass(frozen=True)
class SwaConfig:
    start_round: int
    cycle: int = 1

    def __post_init__(self):
        if self.cycle < 1:
            raise UsageError("SWA cycle must be >= 1")
        if self.start_round < 0:
            raise UsageError("SWA start_round must be >= 0")


@dataclass(frozen=True)
class ServerConfig:
    rounds: int
    clients_per_round: int
    server_lr: float = 1.0
    server_momentum: float = 0.0
    aggregator: str = "fedavg"
    wima: WimaConfig | None = None
    swa: SwaConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise UsageError("rounds must be >= 0")
        if self.clients_per_round < 1:
            raise UsageError("clients_per_round must be >= 1")
        if not self.server_lr > 0:
            raise UsageError("server_lr must be > 0")
        if not 0.0 <= self.server_momentum < 1.0:
            raise UsageError("server_momentum must lie in [0, 1)")
        if self.aggregator not in AGGREGATORS:
            raise UsageError(f"aggregator must be one of {AGGREGATORS}")
        if self.swa is not None and self.rounds > 0 and self.swa.start_round >= self.rounds:
            raise UsageError("SWA start_round must be < rounds")
        if self.seed < 0:
            raise UsageError("seed must be non-negative")


class WimaWindow:
    """FIFO of the last ``size`` models with an O(d) running mean.

    The running sum is kept relative to a reference vector (the oldest model
    at the last rebase), so a window of identical models averages back to
    that model exactly. The sum is rebuilt from scratch every
    ``RECOMPUTE_EVERY`` pushes to bound rounding drift.
    """

    def __init__(self, size: int):
        if size < 1:
            raise UsageError("window size must be >= 1")
        self.size = size
        self.items: deque[ParamVector] = deque()
        self._ref: np.ndarray | None = None
        self._dev_sum: np.ndarray | None = None
        self.pushes = 0

    def __len__(self) -> int:
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) == self.size

    def push(self, w: ParamVector) -> ParamVector:
        if not w.is_finite():
            raise NumericDivergenceError("non-finite model pushed into the WIMA window")
        if self._ref is None:
            self._ref = w.values.copy()
            self._dev_sum = np.zeros_like(self._ref)
        if len(self.items) == self.size:
            old = self.items.popleft()
            self._dev_sum -= old.values - self._ref
        self.items.append(w)
        self._dev_sum += w.values - self._ref
        self.pushes += 1
        if self.pushes % RECOMPUTE_EVERY == 0:
            self.recompute()
        return self.mean()

    def recompute(self) -> None:
        self._ref = self.items[0].values.copy()
        acc = np.zeros_like(self._ref)
        for item in self.items:
            acc += item.values - self._ref
        self._dev_sum = acc

    def mean(self) -> ParamVector:
        if not self.items:
            raise UsageError("WIMA window is empty")
        if len(self.items) == 1:
            return self.items[0]
        layout = self.items[0].layout
        return ParamVector(self._ref + self._dev_sum / len(self.items), layout, copy=False)

    def running_sum(self) -> np.ndarray:
        return len(self.items) * self._ref + self._dev_sum

    def direct_sum(self) -> np.ndarray:
        acc = np.zeros(self.items[0].layout.total_len)
        for item in self.items:
            acc += item.values
        return acc


@dataclass
class SwaAverager:
    average: ParamVector | None = None
    count: int = 0

    def fold(self, w: ParamVector) -> ParamVector:
        if self.average is None:
            self.average = w
        else:
            self.average = ParamVector(
                (self.average.values * self.count + w.values) / (self.count + 1), w.layout, copy=False
            )
        self.count += 1
        return self.average


@dataclass(frozen=True)
class LogEntry:
    round: int
    w_start: ParamVector
    pseudo_gradient: ParamVector  # sum_i (N_i / N) dw_i
    server_step: ParamVector  # w_start - w_next, whatever the server optimizer


class PseudoGradientLog:
    """The last ``depth`` rounds of aggregated pseudo-gradients and their start models."""

    def __init__(self, depth: int):
        self.depth = depth
        self.entries: deque[LogEntry] = deque(maxlen=max(depth, 1))

    def __len__(self) -> int:
        return len(self.entries) if self.depth > 0 else 0

    def append(self, entry: LogEntry) -> None:
        if self.depth > 0:
            self.entries.append(entry)

    def anchor(self, window: int) -> ParamVector:
        """Global model at the start of the oldest of the last ``window`` rounds."""
        if len(self) < window:
            raise UsageError(f"log holds {len(self)} rounds, need {window}")
        return self.entries[len(self.entries) - window].w_start

    def last(self, window: int) -> list[LogEntry]:
        if len(self) < window:
            raise UsageError(f"log holds {len(self)} rounds, need {window}")
        return list(self.entries)[-window:]


@dataclass
class ServerState:
    w: ParamVector
    num_clients: int
    round: int = 0
    momentum_buffer: ParamVector | None = None
    control: ParamVector | None = None
    window: WimaWindow | None = None
    swa: SwaAverager = field(default_factory=SwaAverager)
    log: PseudoGradientLog = field(default_factory=lambda: PseudoGradientLog(0))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sampled_clients: tuple[int, ...]
    mean_local_loss: float
    acc_fedavg: float | None = None
    acc_wima: float | None = None
    acc_swa: float | None = None
    identity_residual: float | None = None


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def sample_clients(num_clients: int, m: int, round: int, seed: int) -> list[int]:
    """Sorted uniform sample of ``m`` distinct client ids, deterministic in ``(seed, round)``."""
    if not 1 <= m <= num_clients:
        raise UsageError(f"cannot sample {m} of {num_clients} clients")
    if m == num_clients:
        return list(range(num_clients))
    picked = _rng(seed, _TAG_SAMPLE, round).choice(num_clients, size=m, replace=False)
    return sorted(int(i) for i in picked)


def aggregate(state: ServerState, results: Sequence[LocalResult], cfg: ServerConfig) -> ParamVector:
    """Apply one server update from the clients' results and advance ``state.w``.

    The aggregated pseudo-gradient is logged before returning the new model.
    """
    if not results:
        raise UsageError("aggregate needs at least one client result")
    delta = weighted_mean([r.pseudo_gradient for r in results], [r.num_samples for r in results])
    w = state.w
    if cfg.aggregator == "fedavgm":
        if state.momentum_buffer is None:
            state.momentum_buffer = ParamVector.zeros(w.layout)
        state.momentum_buffer = axpy(cfg.server_momentum, state.momentum_buffer, delta)
        w_next = axpy(-cfg.server_lr, state.momentum_buffer, w)
    else:
        w_next = axpy(-cfg.server_lr, delta, w)
    if cfg.aggregator == "scaffold":
        if state.control is None:
            state.control = ParamVector.zeros(w.layout)
        deltas = [r.new_control_delta for r in results]
        if any(d is None for d in deltas):
            raise UsageError("scaffold aggregation needs control deltas from every client")
        mean_dc = weighted_mean(deltas, [1.0] * len(deltas))
        state.control = axpy(len(results) / state.num_clients, mean_dc, state.control)
    if not w_next.is_finite():
        raise NumericDivergenceError(f"non-finite global model after round {state.round}", round=state.round)
    state.log.append(LogEntry(state.round, w, delta, w - w_next))
    state.w = w_next
    return w_next


def wima_update(state: ServerState, w_new: ParamVector, window: int) -> ParamVector:
    """Push ``w_new`` into the window and return the average of its contents."""
    if state.window is None:
        state.window = WimaWindow(window)
    elif state.window.size != window:
        raise UsageError(f"window already sized {state.window.size}, asked for {window}")
    return state.window.push(w_new)


def wima_model_masked(state: ServerState, mask: SegmentMask) -> ParamVector:
    """Window average on the masked segments, current global model elsewhere."""
    if state.window is None or len(state.window) == 0:
        raise UsageError("WIMA window is empty")
    return masked_blend(state.w, state.window.mean(), mask)


def swa_update(
    state: ServerState, w_new: ParamVector, round: int, start_round: int, cycle: int
) -> ParamVector | None:
    if cycle < 1:
        raise UsageError("SWA cycle must be >= 1")
    if round < start_round:
        return None
    if (round - start_round) % cycle == 0:
        return state.swa.fold(w_new)
    return state.swa.average


def decay_form_reconstruct(
    log: PseudoGradientLog, w_start: ParamVector, server_lr: float, window: int
) -> ParamVector:
    """Window average rebuilt from the anchor and position-weighted pseudo-gradients.

    ``w_start - server_lr * sum_k ((W - k) / W) * dw_k`` over the last ``W``
    logged rounds, oldest first. Valid for a plain SGD server step.
    """
    entries = log.last(window)
    acc = np.zeros(w_start.layout.total_len)
    for k, e in enumerate(entries):
        acc += ((window - k) / window) * e.pseudo_gradient.values
    return ParamVector(w_start.values - server_lr * acc, w_start.layout, copy=False)


def decay_form_reconstruct_steps(log: PseudoGradientLog, w_start: ParamVector, window: int) -> ParamVector:
    """Same as :func:`decay_form_reconstruct` but with the logged server steps.

    Holds for any server optimizer, e.g. server momentum.
    """
    entries = log.last(window)
    acc = np.zeros(w_start.layout.total_len)
    for k, e in enumerate(entries):
        acc += ((window - k) / window) * e.server_step.values
    return ParamVector(w_start.values - acc, w_start.layout, copy=False)


class Simulation:
    """All mutable state of one federated run: server, clients and shadows."""

    def __init__(
        self,
        spec: ModelSpec,
        fed: FederatedDataset,
        local_cfg: LocalConfig,
        server_cfg: ServerConfig,
        *,
        audit_identity: bool = False,
        workers: int = 1,
        init: ParamVector | None = None,
    ):
        if server_cfg.clients_per_round > fed.num_clients:
            raise UsageError(
                f"clients_per_round={server_cfg.clients_per_round} exceeds {fed.num_clients} clients"
            )
        if (server_cfg.aggregator == "scaffold") != (local_cfg.algorithm == "scaffold"):
            raise UsageError("scaffold must be chosen on both the client and the server side")
        if audit_identity and server_cfg.wima is None:
            raise UsageError("identity audit needs a WIMA window")
        self.spec = spec
        self.fed = fed
        self.local_cfg = local_cfg
        self.cfg = server_cfg
        self.audit_identity = audit_identity
        self.workers = workers
        w0 = init if init is not None else init_params(spec, server_cfg.seed)
        self.state = ServerState(w=w0, num_clients=fed.num_clients)
        if server_cfg.aggregator == "scaffold":
            self.state.control = ParamVector.zeros(spec.layout)
        self.mask = None
        if server_cfg.wima is not None:
            self.state.window = WimaWindow(server_cfg.wima.window)
            self.mask = server_cfg.wima.resolve_mask(spec.layout)
            if audit_identity:
                self.state.log = PseudoGradientLog(server_cfg.wima.window)
        self.client_states = {c.client_id: ClientState() for c in fed.clients}

    @property
    def round(self) -> int:
        return self.state.round

    def wima_model(self) -> ParamVector | None:
        if self.state.window is None or len(self.state.window) == 0:
            return None
        return wima_model_masked(self.state, self.mask)

    def _train_one(self, cid: int, w_t: ParamVector, c: ParamVector | None, t: int) -> LocalResult:
        client = self.fed.clients[cid]
        return local_train(
            self.spec, w_t, client.data, self.local_cfg, self.client_states[cid], c,
            seed=np.random.SeedSequence([self.cfg.seed, _TAG_CLIENT, t, cid]), client_id=cid,
        )

    def run_round(self, evaluate: bool = True) -> RoundRecord:
        t = self.state.round
        if t >= self.cfg.rounds:
            raise UsageError(f"round {t} is past the configured {self.cfg.rounds} rounds")
        sampled = sample_clients(self.fed.num_clients, self.cfg.clients_per_round, t, self.cfg.seed)
        w_t, c = self.state.w, self.state.control
        try:
            if self.workers > 1:
                with ThreadPoolExecutor(self.workers) as pool:
                    results = list(pool.map(lambda cid: self._train_one(cid, w_t, c, t), sampled))
            else:
                results = [self._train_one(cid, w_t, c, t) for cid in sampled]
        except NumericDivergenceError as exc:
            exc.round = t
            raise
        w_next = aggregate(self.state, results, self.cfg)

        residual = None
        if self.cfg.wima is not None:
            W = self.cfg.wima.window
            wima_mean = wima_update(self.state, w_next, W)
            if self.audit_identity and self.state.window.full:
                residual = self.identity_residual(wima_mean)
        if self.cfg.swa is not None:
            swa_update(self.state, w_next, t, self.cfg.swa.start_round, self.cfg.swa.cycle)
        self.state.round = t + 1

        loss = 0.0
        for r in results:
            loss += r.mean_loss
        loss /= len(results)

        acc_f = acc_w = acc_s = None
        if evaluate:
            test = self.fed.test_set
            acc_f = accuracy(self.spec, w_next, test.features, test.labels)
            if self.cfg.wima is not None:
                acc_w = accuracy(self.spec, self.wima_model(), test.features, test.labels)
            if self.state.swa.average is not None:
                acc_s = accuracy(self.spec, self.state.swa.average, test.features, test.labels)
        return RoundRecord(t, tuple(sampled), loss, acc_f, acc_w, acc_s, residual)

    def identity_residual(self, wima_mean: ParamVector | None = None) -> float:
        """Infinity-norm gap between the window mean and its decay-form reconstruction."""
        W = self.cfg.wima.window
        wima_mean = wima_mean if wima_mean is not None else self.state.window.mean()
        anchor = self.state.log.anchor(W)
        if self.cfg.aggregator == "fedavgm":
            rebuilt = decay_form_reconstruct_steps(self.state.log, anchor, W)
        else:
            rebuilt = decay_form_reconstruct(self.state.log, anchor, self.cfg.server_lr, W)
        return float(np.max(np.abs(wima_mean.values - rebuilt.values)))

    # checkpointing -------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        """Write everything needed to continue the run bit-for-bit."""
        s = self.state
        arrays: dict[str, np.ndarray] = {"w": s.w.values}
        meta: dict = {"round": s.round, "model": self.spec.to_dict(), "layout": s.w.layout.to_dict()}
        if s.momentum_buffer is not None:
            arrays["momentum"] = s.momentum_buffer.values
        if s.control is not None:
            arrays["control"] = s.control.values
        if s.window is not None and len(s.window):
            arrays["window_items"] = np.stack([v.values for v in s.window.items])
            arrays["window_ref"] = s.window._ref
            arrays["window_dev_sum"] = s.window._dev_sum
            meta["window_pushes"] = s.window.pushes
        if s.swa.average is not None:
            arrays["swa_average"] = s.swa.average.values
            meta["swa_count"] = s.swa.count
        if len(s.log):
            arrays["log_w_start"] = np.stack([e.w_start.values for e in s.log.entries])
            arrays["log_pseudo_gradient"] = np.stack([e.pseudo_gradient.values for e in s.log.entries])
            arrays["log_server_step"] = np.stack([e.server_step.values for e in s.log.entries])
            meta["log_rounds"] = [e.round for e in s.log.entries]
        ids = sorted(k for k, v in self.client_states.items() if v.control is not None)
        if ids:
            arrays["client_controls"] = np.stack([self.client_states[k].control.values for k in ids])
        meta["client_control_ids"] = ids
        meta["client_steps"] = {str(k): v.steps_taken for k, v in self.client_states.items()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)

    def load_checkpoint(self, path: str | Path) -> None:
        try:
            data = np.load(path, allow_pickle=False)
            meta = json.loads(str(data["meta"]))
        except (OSError, ValueError, KeyError) as exc:
            raise DataFormatError(f"{path}: unreadable checkpoint ({exc})") from exc
        layout = self.spec.layout
        if ParamLayout.from_dict(meta["layout"]) != layout:
            raise UsageError(f"{path}: checkpoint layout does not match the model")

        def vec(a):
            return ParamVector(a, layout)

        s = self.state
        s.round = int(meta["round"])
        s.w = vec(data["w"])
        s.momentum_buffer = vec(data["momentum"]) if "momentum" in data else None
        if "control" in data:
            s.control = vec(data["control"])
        if s.window is not None:
            s.window = WimaWindow(s.window.size)
            if "window_items" in data:
                s.window.items.extend(vec(a) for a in data["window_items"])
                s.window._ref = data["window_ref"].copy()
                s.window._dev_sum = data["window_dev_sum"].copy()
                s.window.pushes = int(meta["window_pushes"])
        s.swa = SwaAverager()
        if "swa_average" in data:
            s.swa = SwaAverager(vec(data["swa_average"]), int(meta["swa_count"]))
        s.log = PseudoGradientLog(s.log.depth)
        if "log_w_start" in data:
            for r, a, b, c in zip(meta["log_rounds"], data["log_w_start"],
                                  data["log_pseudo_gradient"], data["log_server_step"]):
                s.log.append(LogEntry(int(r), vec(a), vec(b), vec(c)))
        controls = data["client_controls"] if "client_controls" in data else []
        for k, a in zip(meta["client_control_ids"], controls):
            self.client_states[int(k)].control = vec(a)
        for k, steps in meta["client_steps"].items():
            self.client_states[int(k)].steps_taken = int(steps)
        data.close()
