"""Local training on one client for one round.

Three local procedures share the same SGD loop:

* ``vanilla`` -- plain mini-batch SGD (optionally with momentum and weight decay);
* ``prox`` -- adds ``mu * (w - w_global)`` to every gradient (FedProx);
* ``scaffold`` -- adds the control-variate correction ``c - c_i`` to every
  gradient and refreshes ``c_i`` afterwards with the "option II" rule
  ``c_i <- c_i - c + (w_global - w_local) / (K * lr)``, ``K`` = local steps.

Momentum buffers live only for the duration of one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .data import Dataset
from .errors import DimensionError, NumericDivergenceError, UsageError
from .model import ModelSpec
from .paramvec import ParamVector

ALGORITHMS = ("vanilla", "prox", "scaffold")


@dataclass(frozen=True)
class LocalConfig:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 100
    algorithm: str = "vanilla"
    mu: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise UsageError(f"local lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise UsageError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise UsageError("epochs and batch_size must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise UsageError(f"algorithm must be one of {ALGORITHMS}")
        if not self.mu >= 0:
            raise UsageError("mu must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ClientState:
    control: ParamVector | None = None
    steps_taken: int = 0


@dataclass(frozen=True)
class LocalResult:
    client_id: int
    updated_params: ParamVector
    pseudo_gradient: ParamVector
    num_samples: int
    mean_loss: float
    steps: int
    new_control_delta: ParamVector | None = None


def pseudo_gradient(w_t: ParamVector, w_i: ParamVector) -> ParamVector:
    """``w_t - w_i``: the client's update expressed as a descent direction."""
    if w_t.layout != w_i.layout:
        raise DimensionError("pseudo_gradient: layout mismatch")
    return w_t - w_i


def epoch_orders(n: int, epochs: int, seed) -> np.ndarray:
    """One fresh permutation of ``range(n)`` per epoch, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return np.stack([rng.permutation(n) for _ in range(epochs)]).astype(np.int64)


def local_train(
    spec: ModelSpec,
    global_params: ParamVector,
    data: Dataset,
    cfg: LocalConfig,
    state: ClientState | None = None,
    server_control: ParamVector | None = None,
    seed=0,
    client_id: int = 0,
) -> LocalResult:
    """Train from ``global_params`` on ``data`` and return the local model and pseudo-gradient.

    For SCAFFOLD ``state.control`` is replaced by the refreshed control
    variate and the difference is returned as ``new_control_delta``.
    """
    if len(data) == 0:
        raise UsageError(f"client {client_id} has an empty dataset")
    if global_params.layout != spec.layout:
        raise DimensionError("global params do not match the model spec")
    if data.input_dim != spec.input_dim:
        raise DimensionError(f"client data has {data.input_dim} features, model expects {spec.input_dim}")
    state = state if state is not None else ClientState()

    correction = None
    if cfg.algorithm == "scaffold":
        if server_control is None:
            raise UsageError("scaffold needs the server control variate")
        if state.control is None:
            state.control = ParamVector.zeros(spec.layout)
        correction = server_control.values - state.control.values

    mu = cfg.mu if cfg.algorithm == "prox" else 0.0
    order = epoch_orders(len(data), cfg.epochs, seed)
    kind, d, h, c, act = spec.kernel_args
    w, loss_sum, steps, bad_step = _backend.kernels.local_sgd(
        kind, global_params.values, data.features, data.labels, order, cfg.batch_size,
        cfg.lr, cfg.momentum, cfg.weight_decay, mu, global_params.values, correction,
        d, h, c, act,
    )
    if bad_step >= 0:
        raise NumericDivergenceError(
            f"client {client_id}: non-finite parameters at local step {bad_step}", step=bad_step
        )
    w_i = ParamVector(w, spec.layout, copy=False)
    delta = pseudo_gradient(global_params, w_i)

    control_delta = None
    if cfg.algorithm == "scaffold":
        old = state.control
        new = ParamVector(
            old.values - server_control.values + delta.values / (steps * cfg.lr), spec.layout, copy=False
        )
        control_delta = new - old
        state.control = new
    state.steps_taken += steps

    return LocalResult(
        client_id=client_id,
        updated_params=w_i,
        pseudo_gradient=delta,
        num_samples=len(data),
        mean_loss=loss_sum / steps,
        steps=steps,
        new_control_delta=control_delta,
    )
