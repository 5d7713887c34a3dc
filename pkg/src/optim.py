"""Optimizers over the trainable tensors of a parameter store."""

import logging
from abc import ABC, abstractmethod
from typing import Dict, List, Sequence

import numpy as np

from .base import ConfigurationError, NumericalError, TrainConfig
from .numcore import Tensor

logger = logging.getLogger(__name__)


class Optimizer(ABC):
    """Updates ``data`` of the given tensors in place from their ``grad``."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float):
        if learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        self.params: List[Tensor] = list(params)
        self.learning_rate = learning_rate
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        for index, p in enumerate(self.params):
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"Non-finite gradient for {p.name or index}")
            self._update(index, p, p.grad.astype(p.data.dtype, copy=False))

    @abstractmethod
    def _update(self, index: int, param: Tensor, grad: np.ndarray) -> None:
        pass


class SGD(Optimizer):
    """SGD with classical momentum."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float, momentum: float = 0.9):
        super().__init__(params, learning_rate)
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def _update(self, index: int, param: Tensor, grad: np.ndarray) -> None:
        v = self._velocity.get(index)
        v = grad.copy() if v is None else self.momentum * v + grad
        self._velocity[index] = v
        param.data -= self.learning_rate * v


class Adam(Optimizer):
    def __init__(self, params: Sequence[Tensor], learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    def _update(self, index: int, param: Tensor, grad: np.ndarray) -> None:
        m = self._m.get(index, np.zeros_like(grad))
        v = self._v.get(index, np.zeros_like(grad))
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self._m[index], self._v[index] = m, v
        m_hat = m / (1.0 - self.beta1 ** self.steps)
        v_hat = v / (1.0 - self.beta2 ** self.steps)
        param.data -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.data.dtype)


def make_optimizer(params: Sequence[Tensor], config: TrainConfig) -> Optimizer:
    """Build the optimizer named by the training config."""
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate, config.momentum)
    return Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
