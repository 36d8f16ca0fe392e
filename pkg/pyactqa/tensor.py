"""
Module for the dense tensor value used throughout pyactqa.

A tensor is a float64, row-major :class:`numpy.ndarray`. The helpers here are the checked entry points: they validate
shapes, refuse non-finite results and hand back read-only arrays so values can be shared between threads.
"""
from typing import Sequence, Union

import numpy as np
import numpy.typing as npt

from pyactqa.exceptions import NumericalException, ShapeException

Tensor = npt.NDArray[np.float64]

EWISE_OPS = ("add", "sub", "mul", "scale", "map")


def freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def check_finite(array: np.ndarray, what: str = "tensor") -> np.ndarray:
    """
    Raise if :param array: holds NaN or Inf

    :param array: The array to check
    :param what: Name used in the error message

    :return: :param array: unchanged
    """
    if not np.all(np.isfinite(array)):
        bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
        raise NumericalException(f"{bad} non-finite value(s) in {what}", what)

    return array


def tensor(data, dims: Sequence[int] = None) -> Tensor:
    """
    Build a tensor from nested sequences, or from a flat row-major sequence plus :param dims:

    :param data: Values
    :param dims: Optional axis sizes; product(dims) must equal the number of values

    :return: A read-only float64 tensor
    """
    array = np.array(data, dtype=np.float64, order="C")

    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d < 1 for d in dims):
            raise ShapeException(f"Axis sizes must be positive, got {dims}", dims)
        if int(np.prod(dims)) != array.size:
            raise ShapeException(f"{array.size} values cannot fill dims {dims}", dims)
        array = array.reshape(dims)

    return freeze(check_finite(array))


def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.size:
        raise ShapeException(f"Cannot reshape {a.shape} to {dims}", (a.shape, dims))

    return freeze(np.ascontiguousarray(a).reshape(dims).copy())


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Rank-2 matrix product

    :raises ShapeException: if the inner dimensions disagree, naming both operands
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeException(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}", (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise ShapeException(f"matmul inner dimensions differ: a{a.shape} x b{b.shape}", (a.shape, b.shape))

    return freeze(check_finite(a @ b, "matmul"))


def ewise(op: str, a: Tensor, b: Union[Tensor, float, callable]) -> Tensor:
    """
    Elementwise operation.

    `add`, `sub` and `mul` take a second tensor of identical dims (or a scalar), `scale` takes a scalar and `map`
    takes a callable applied elementwise (it receives the whole array and must return one of the same shape).

    :param op: One of add, sub, mul, scale, map
    :param a: Left operand
    :param b: Right operand, scalar or callable depending on :param op:
    """
    a = np.asarray(a, dtype=np.float64)

    if op == "map":
        out = np.asarray(b(a), dtype=np.float64)
        if out.shape != a.shape:
            raise ShapeException(f"map changed shape {a.shape} -> {out.shape}", (a.shape, out.shape))
    elif op == "scale":
        if not np.isscalar(b):
            raise ShapeException("scale expects a scalar", (a.shape, np.shape(b)))
        out = a * float(b)
    elif op in ("add", "sub", "mul"):
        if not np.isscalar(b):
            b = np.asarray(b, dtype=np.float64)
            if b.shape != a.shape:
                raise ShapeException(f"{op} operands differ: {a.shape} vs {b.shape}", (a.shape, b.shape))
        out = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    else:
        raise ShapeException(f"Unknown elementwise op {op}, expected one of {EWISE_OPS}", op)

    return freeze(check_finite(np.array(out, dtype=np.float64), op))


def argmax_axis(a: Tensor, axis: int) -> np.ndarray:
    """
    Index of the maximum along :param axis:. Ties resolve to the lowest index.

    :return: Integer array with :param axis: removed
    """
    a = np.asarray(a)
    if axis < 0 or axis >= a.ndim:
        raise ShapeException(f"axis {axis} out of range for rank {a.ndim}", (a.shape, axis))
    if a.shape[axis] == 0:
        raise ShapeException(f"Cannot take argmax over empty axis {axis}", (a.shape, axis))

    # numpy returns the first occurrence of the maximum
    return freeze(np.argmax(a, axis=axis))


def zeros_like(a: Tensor) -> Tensor:
    return freeze(np.zeros_like(a, dtype=np.float64))
