"""Layers with explicit forward/backward over sparse tensors and plain row arrays.

Each layer caches what its backward needs during ``forward``; calling
``backward`` first raises ``StateError``. Parameter gradients accumulate until
the optimizer zeroes them.
"""

from __future__ import annotations

import numpy as np

from ..sparse import ops
from ..sparse.conv import (kernel_map_backward, inverse_conv, strided_conv,
                           submanifold_conv)
from ..sparse.tensor import SparseTensor


class StateError(RuntimeError):
    pass


class Parameter:
    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def astype(self, dtype):
        for name in self.__slots__:
            setattr(self, name, getattr(self, name).astype(dtype))


class Layer:
    training = True

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Layer):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Layer):
                        yield f"{name}.{i}", item

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix=""):
        for name, v in vars(self).items():
            if isinstance(v, Parameter):
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.value for n, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.value = np.ascontiguousarray(state[name], dtype=p.value.dtype).copy()
        for mod_prefix, mod in self._named_modules():
            for name in getattr(mod, "_buffers", ()):
                cur = getattr(mod, name)
                setattr(mod, name, np.asarray(state[mod_prefix + name], dtype=cur.dtype).copy())

    def _named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children():
            yield from child._named_modules(f"{prefix}{name}.")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        for m in self.modules():
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def macs(self) -> int:
        """MACs of the most recent forward pass."""
        return sum(getattr(m, "last_macs", 0) for m in self.modules())

    def _need(self, cache):
        if cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return cache


def kaiming(rng, shape, fan_in, dtype=np.float32, gain=2.0):
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)


class _Conv(Layer):
    taps = 1

    def __init__(self, in_channels, out_channels, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = self.taps * in_channels
        self.weight = Parameter(kaiming(rng, (self.taps, in_channels, out_channels), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype))
        self._cache = None
        self.last_macs = 0

    def _run(self, x):
        raise NotImplementedError

    def forward(self, x: SparseTensor) -> SparseTensor:
        out, kmap = self._run(x)
        self._cache = (x.features, kmap)
        self.last_macs = kmap.total_pairs * self.in_channels * self.out_channels
        return out

    def backward(self, grad):
        feats, kmap = self._need(self._cache)
        gi, gw, gb = kernel_map_backward(feats, kmap, self.weight.value, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gi


class SubmConv(_Conv):
    def __init__(self, in_channels, out_channels, kernel_size, rng, dtype=np.float32):
        self.kernel_size = kernel_size
        self.taps = kernel_size * kernel_size
        super().__init__(in_channels, out_channels, rng, dtype)

    def _run(self, x):
        return submanifold_conv(x, self.weight.value, self.bias.value)


class StridedConv(_Conv):
    """2x2 stride-2 downsampling conv."""
    taps = 4

    def _run(self, x):
        return strided_conv(x, self.weight.value, self.bias.value)


class InverseConv(_Conv):
    """2x2 transposed conv back onto the cached finer sites."""
    taps = 4

    def _run(self, x):
        return inverse_conv(x, self.weight.value, self.bias.value)


class BatchNorm(Layer):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float32):
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, dtype))
        self.beta = Parameter(np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self._cache = None

    def forward(self, x: SparseTensor) -> SparseTensor:
        train = self.training and len(x) > 0
        out, (xhat, inv_std) = ops.batch_norm(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, train)
        self._cache = (xhat, inv_std, train)
        return out

    def backward(self, grad):
        xhat, inv_std, train = self._need(self._cache)
        self.gamma.grad += (grad * xhat).sum(axis=0)
        self.beta.grad += grad.sum(axis=0)
        dxhat = grad * self.gamma.value
        if not train:
            return dxhat * inv_std
        n = grad.shape[0]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                - xhat * (dxhat * xhat).sum(axis=0))


class ReLU(Layer):
    def __init__(self):
        self.mask = None

    def forward(self, x):
        f = x.features if isinstance(x, SparseTensor) else x
        self.mask = f > 0
        out = f * self.mask
        return x.replace(out) if isinstance(x, SparseTensor) else out

    def backward(self, grad):
        return grad * self._need(self.mask)


class Linear(Layer):
    def __init__(self, in_channels, out_channels, rng, dtype=np.float32, gain=2.0, scale=1.0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        w = (kaiming(rng, (in_channels, out_channels), in_channels, dtype, gain) * scale).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels, dtype))
        self._cache = None
        self.last_macs = 0

    def forward(self, x):
        f = x.features if isinstance(x, SparseTensor) else x
        if f.shape[1] != self.in_channels:
            raise ValueError(f"channel mismatch: {f.shape[1]} vs {self.in_channels}")
        self._cache = f
        self.last_macs = f.shape[0] * self.in_channels * self.out_channels
        out = f @ self.weight.value + self.bias.value
        return x.replace(out) if isinstance(x, SparseTensor) else out

    def backward(self, grad):
        f = self._need(self._cache)
        self.weight.grad += f.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value.T


class ConvBN(Layer):
    """Submanifold conv followed by batch norm, optionally ReLU."""

    def __init__(self, cin, cout, ksize, rng, relu=True, dtype=np.float32):
        self.conv = SubmConv(cin, cout, ksize, rng, dtype)
        self.bn = BatchNorm(cout, dtype)
        self.act = ReLU() if relu else None

    def forward(self, x):
        x = self.bn.forward(self.conv.forward(x))
        return self.act.forward(x) if self.act is not None else x

    def backward(self, grad):
        if self.act is not None:
            grad = self.act.backward(grad)
        return self.conv.backward(self.bn.backward(grad))


class BasicBlock(Layer):
    """ResNet basic block; 1x1 conv + BN shortcut when channels change."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.in_channels = cin
        self.out_channels = cout
        self.branch = [ConvBN(cin, cout, 3, rng, True, dtype), ConvBN(cout, cout, 3, rng, False, dtype)]
        self.shortcut = ConvBN(cin, cout, 1, rng, False, dtype) if cin != cout else None
        self.act = ReLU()

    def forward(self, x):
        h = self.branch[1].forward(self.branch[0].forward(x))
        skip = self.shortcut.forward(x) if self.shortcut is not None else x
        return self.act.forward(ops.residual_add(h, skip))

    def backward(self, grad):
        grad = self.act.backward(grad)
        g_branch = self.branch[0].backward(self.branch[1].backward(grad))
        g_skip = self.shortcut.backward(grad) if self.shortcut is not None else grad
        return g_branch + g_skip


class Sequential(Layer):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


def _fold_into(conv: _Conv, bn: BatchNorm):
    w, b = ops.fold_batch_norm(conv.weight.value, conv.bias.value, bn.gamma.value, bn.beta.value,
                               bn.running_mean, bn.running_var)
    conv.weight = Parameter(w.astype(conv.weight.value.dtype))
    conv.bias = Parameter(b.astype(conv.bias.value.dtype))


def fold_batch_norms(net: Layer) -> int:
    """Fold every conv -> BN pair into the conv, in place, for inference.

    Returns the number of folded pairs. The network must be used in eval mode
    afterwards.
    """
    count = 0
    for m in list(net.modules()):
        if isinstance(m, ConvBN) and isinstance(m.bn, BatchNorm):
            _fold_into(m.conv, m.bn)
            m.bn = Identity()
            count += 1
        elif isinstance(m, Sequential):
            for i in range(len(m.layers) - 1):
                a, b = m.layers[i], m.layers[i + 1]
                if isinstance(a, _Conv) and isinstance(b, BatchNorm):
                    _fold_into(a, b)
                    m.layers[i + 1] = Identity()
                    count += 1
    net.eval()
    return count
