"""
Module for the named parameter store shared by the model, trainer and checkpoint code
"""
from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from pyactqa.exceptions import RegistrationException, ShapeException
from pyactqa.synchronized import synchronized
from pyactqa.tensor import Tensor, check_finite, freeze


@synchronized
class ParameterStore:
    """
    Ordered map of parameter name -> read-only tensor. Names look like "<layer>.<param>", e.g. "head_fc1.weight".

    Updates replace whole tensors, so a reader holding a tensor never sees it change underneath it.
    """

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name: str, value: np.ndarray):
        if name in self._params:
            raise RegistrationException(f"Parameter {name} is already registered!", name)
        self._params[name] = freeze(np.array(value, dtype=np.float64))

    def get(self, name: str) -> Tensor:
        if name not in self._params:
            raise RegistrationException(f"No parameter {name} registered!", name)
        return self._params[name]

    def set(self, name: str, value: np.ndarray):
        current = self.get(name)
        value = np.array(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeException(f"Parameter {name} has shape {current.shape}, got {value.shape}",
                                 (current.shape, value.shape))
        self._params[name] = freeze(check_finite(value, name))

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return list(self._params.items())


def layer_of(name: str) -> str:
    return name.split(".", 1)[0]
