from typing import Dict, List, Sequence, Tuple
import logging

import numpy as np

from src.exceptions import ConfigError

logger = logging.getLogger(__name__)

LR_MODES = ('factor', 'compound')


class LrSchedule:
    """Piecewise-constant learning rate.

    In 'factor' mode the k-th milestone sets lr = base_lr * factors[k]; in 'compound' mode the factors multiply up,
    lr = base_lr * factors[0] * ... * factors[k].
    """
    def __init__(self, base_lr: float, milestones: Sequence[int], factors: Sequence[float],
                 mode: str = 'factor') -> None:
        if base_lr < 0:
            raise ConfigError('base_lr must be nonnegative')
        if len(milestones) != len(factors):
            raise ConfigError('one factor per milestone is required')
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ConfigError('milestones must be strictly increasing')
        if mode == 'factor' and any(b >= a for a, b in zip(factors, factors[1:])):
            raise ConfigError('factors must be strictly decreasing')
        if mode not in LR_MODES:
            raise ConfigError(f'lr mode must be one of {LR_MODES}, got {mode!r}')
        self.base_lr = float(base_lr)
        self.milestones = list(milestones)
        self.factors = list(factors)
        self.mode = mode

    def lr_at(self, epoch: int) -> float:
        """
        :param int epoch: 0-based epoch index
        :return float: The learning rate used throughout that epoch
        """
        passed = sum(1 for m in self.milestones if epoch >= m)
        if passed == 0:
            return self.base_lr
        if self.mode == 'factor':
            return self.base_lr * self.factors[passed - 1]
        return self.base_lr * float(np.prod(self.factors[:passed]))


class SgdMomentum:
    """SGD with heavy-ball momentum and L2 weight decay.

    Updates in place: g <- grad + weight_decay * p (weight matrices only, never biases), v <- momentum * v + g,
    p <- p - lr * v. The parameters are held by reference, so the owning params object sees every step.
    """
    def __init__(self, named_params: List[Tuple[str, np.ndarray]], momentum: float = 0.9,
                 weight_decay: float = 0.0) -> None:
        """
        Constructor for SgdMomentum class

        :param List[Tuple[str, np.ndarray]] named_params: (name, array) pairs; arrays are updated in place
        :param float momentum: The momentum coefficient
        :param float weight_decay: The L2 coefficient applied to arrays whose name starts with 'W'
        """
        names = [name for name, _ in named_params]
        if len(set(names)) != len(names):
            raise ConfigError('parameter names must be unique')
        self.named_params = named_params
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p) for name, p in named_params}

    @staticmethod
    def decays(name: str) -> bool:
        return name.split('.')[-1].startswith('W')

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.named_params:
            g = grads[name]
            if self.weight_decay and SgdMomentum.decays(name):
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v
