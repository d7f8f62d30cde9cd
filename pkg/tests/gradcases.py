"""Small random-tensor problems for reverse-mode vs finite-difference checks."""

import numpy as np

from sharknet import tensor as T
from sharknet.optim import sparse_ce_loss
from sharknet.tensor import Graph, Tensor, precision

from oracles import central_differences, max_relative_error


def layer_gradient_cases(rng):
    """(name, fn over tensors, input arrays) with inputs kept away from kinks."""
    def away_from_zero(shape):
        v = rng.uniform(0.1, 1.0, size=shape)
        return v * rng.choice([-1, 1], size=shape)

    def distinct(shape):
        v = rng.permutation(np.prod(shape)).reshape(shape) * 0.05
        return v - v.mean()

    r4 = rng.normal(size=(2, 4, 4, 3))
    rsm = rng.normal(size=(3, 5))
    rconv = rng.normal(size=(2, 4, 4, 2))
    labels = np.array([0, 3, 1, 4])
    return [
        ("matmul", lambda a, b: T.tsum(T.mul(T.matmul(a, b), Tensor(rsm[:3, :2], dtype=a.dtype))),
         [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        ("conv2d", lambda x, w, b: T.tsum(T.mul(T.conv2d(x, w, b), Tensor(rconv, dtype=x.dtype))),
         [rng.normal(size=(2, 6, 6, 3)), rng.normal(size=(3, 3, 3, 2)) * 0.5, rng.normal(size=2)]),
        ("maxpool2d", lambda x: T.tsum(T.mul(T.maxpool2d(x, 2, 2), Tensor(r4[:, :3, :3, :2], dtype=x.dtype))),
         [distinct((2, 6, 6, 2))]),
        ("relu", lambda x: T.tsum(T.mul(T.relu(x), Tensor(rsm, dtype=x.dtype))), [away_from_zero((3, 5))]),
        ("softmax", lambda x: T.tsum(T.mul(T.softmax(x), Tensor(rsm, dtype=x.dtype))), [rng.normal(size=(3, 5))]),
        ("flatten", lambda x: T.tsum(T.mul(T.flatten(x), Tensor(r4.reshape(2, -1), dtype=x.dtype))),
         [rng.normal(size=(2, 4, 4, 3))]),
        ("dropout_inference", lambda x: T.tsum(T.mul(T.dropout(x, 0.5, False), Tensor(rsm, dtype=x.dtype))),
         [rng.normal(size=(3, 5))]),
        ("sparse_ce", lambda z: sparse_ce_loss(z, labels), [rng.normal(size=(4, 5))]),
    ]


CASE_NAMES = [c[0] for c in layer_gradient_cases(np.random.default_rng(0))]
PRECISIONS = {"float32": (np.float32, 1e-3, 1e-3), "float64": (np.float64, 1e-6, 1e-6)}


def check_layer_gradient(case: int, dtype, eps: float, seed: int = 11) -> float:
    """Worst relative error over all inputs of gradient case ``case``."""
    name, fn, arrays = layer_gradient_cases(np.random.default_rng(seed))[case]
    arrays = [a.astype(dtype) for a in arrays]
    worst = 0.0
    with precision(dtype):
        leaves = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
        with Graph().recording() as g:
            out = fn(*leaves)
        g.backward(out)
        for i, a in enumerate(arrays):
            def f(v, i=i):
                args = [Tensor(v if j == i else arrays[j], dtype=dtype) for j in range(len(arrays))]
                return fn(*args).data
            worst = max(worst, max_relative_error(leaves[i].grad, central_differences(f, a, eps)))
    return worst
