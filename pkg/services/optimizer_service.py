# services/optimizer_service.py

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from errors import DimensionMismatch, UsageError
from models import OptimizerStateFile, TrainConfig
from services.encoder_service import TENSOR_NAMES, ModelParams


@dataclass(frozen=True)
class OptimizerHyper:
    name: str = "adam"  # 'adam' | 'sgd_momentum'
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_config(cls, config: TrainConfig) -> "OptimizerHyper":
        return cls(
            name=config.optimizer,
            lr=config.lr,
            momentum=config.momentum,
            beta1=config.adam_beta1,
            beta2=config.adam_beta2,
            eps=config.adam_eps,
        )


@dataclass
class OptimizerState:
    name: str
    t: int = 0
    slots: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def to_file(self) -> OptimizerStateFile:
        return OptimizerStateFile(
            name=self.name,
            t=self.t,
            slots={slot: {k: v.ravel().tolist() for k, v in arrays.items()} for slot, arrays in self.slots.items()},
        )

    @classmethod
    def from_file(cls, state: OptimizerStateFile, like: ModelParams) -> "OptimizerState":
        shapes = {k: v.shape for k, v in like.arrays().items()}
        slots = {
            slot: {k: np.asarray(v, dtype=np.float64).reshape(shapes[k]) for k, v in arrays.items()}
            for slot, arrays in state.slots.items()
        }
        return cls(name=state.name, t=state.t, slots=slots)


def init_optimizer_state(hyper: OptimizerHyper, params: ModelParams) -> OptimizerState:
    if hyper.name == "sgd_momentum":
        return OptimizerState(name=hyper.name, slots={"velocity": params.zeros_like().arrays()})
    if hyper.name == "adam":
        return OptimizerState(name=hyper.name, slots={"m": params.zeros_like().arrays(), "v": params.zeros_like().arrays()})
    raise UsageError(f"unknown optimizer {hyper.name!r}")


def _check_shapes(params: ModelParams, grads: ModelParams, state: OptimizerState) -> None:
    for name in TENSOR_NAMES:
        p, g = getattr(params, name), getattr(grads, name)
        if p.shape != g.shape:
            raise DimensionMismatch(f"Optimizer: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        for slot in state.slots.values():
            if slot[name].shape != p.shape:
                raise DimensionMismatch(f"Optimizer: state for {name} has shape {slot[name].shape}, parameter {p.shape}")


def optimizer_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    hyper: OptimizerHyper,
) -> Tuple[ModelParams, OptimizerState]:
    """Pure update: returns new params and state; inputs are not modified."""
    if state.name != hyper.name:
        raise UsageError(f"optimizer state is {state.name!r}, hyper-parameters are for {hyper.name!r}")
    _check_shapes(params, grads, state)

    new_params = {}
    t = state.t + 1
    if hyper.name == "sgd_momentum":
        velocity = {}
        for name in TENSOR_NAMES:
            v = hyper.momentum * state.slots["velocity"][name] + getattr(grads, name)
            velocity[name] = v
            new_params[name] = getattr(params, name) - hyper.lr * v
        return ModelParams(**new_params), OptimizerState(name=state.name, t=t, slots={"velocity": velocity})

    m_new, v_new = {}, {}
    bias1 = 1.0 - hyper.beta1 ** t
    bias2 = 1.0 - hyper.beta2 ** t
    for name in TENSOR_NAMES:
        g = getattr(grads, name)
        m = hyper.beta1 * state.slots["m"][name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.slots["v"][name] + (1.0 - hyper.beta2) * g * g
        m_new[name], v_new[name] = m, v
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = getattr(params, name) - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return ModelParams(**new_params), OptimizerState(name=state.name, t=t, slots={"m": m_new, "v": v_new})
