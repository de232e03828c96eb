"""Small building blocks shared by the models: linear maps, MLPs,
multi-head attention, and parameter initialization from named streams."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import CounterRng


def init_param(rng: CounterRng, name: str, shape: tuple, scale: Optional[float] = None,
               fill: Optional[float] = None, dtype=np.float32) -> Tensor:
    """Create a trainable tensor from the sub-stream named by ``name``.

    Default scale is 1/sqrt(fan_in) with fan_in = product of all dims but
    the last.  ``fill`` makes a constant tensor instead (0 or 1 inits).
    """
    if fill is not None:
        data = np.full(shape, fill, dtype=dtype)
    else:
        if scale is None:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            scale = 1.0 / np.sqrt(max(fan_in, 1))
        data = rng.derive("param", name).normal(shape, scale).astype(dtype)
    return Tensor(data, requires_grad=True)


class Linear:
    """y = x @ w + b with w of shape (d_in, d_out)."""

    def __init__(self, rng: CounterRng, name: str, d_in: int, d_out: int,
                 scale: Optional[float] = None, zero: bool = False):
        self.w = init_param(rng, f"{name}.w", (d_in, d_out),
                            scale=scale, fill=0.0 if zero else None)
        self.b = init_param(rng, f"{name}.b", (d_out,), fill=0.0)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim > 2:  # fold leading axes into one GEMM
            lead = x.shape[:-1]
            flat = x.reshape((-1, x.shape[-1]))
            return ad.add(ad.matmul(flat, self.w), self.b).reshape(lead + (self.w.shape[1],))
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class LayerNormParams:
    def __init__(self, rng: CounterRng, name: str, d: int):
        self.gain = init_param(rng, f"{name}.gain", (d,), fill=1.0)
        self.bias = init_param(rng, f"{name}.bias", (d,), fill=0.0)
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.gain": self.gain, f"{self.name}.bias": self.bias}


class Mlp:
    """Two-layer relu MLP used inside transformer blocks."""

    def __init__(self, rng: CounterRng, name: str, d: int, hidden: int):
        self.fc1 = Linear(rng, f"{name}.fc1", d, hidden)
        self.fc2 = Linear(rng, f"{name}.fc2", hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def params(self) -> dict[str, Tensor]:
        return {**self.fc1.params(), **self.fc2.params()}


class MultiHeadAttention:
    """Projected multi-head attention over the second-to-last axis.

    Queries and keys/values may come from different token sets; all
    leading axes broadcast through the batched matmuls.
    """

    def __init__(self, rng: CounterRng, name: str, d: int, heads: int):
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by heads {heads}")
        self.d = d
        self.heads = heads
        self.wq = Linear(rng, f"{name}.q", d, d)
        self.wk = Linear(rng, f"{name}.k", d, d)
        self.wv = Linear(rng, f"{name}.v", d, d)
        self.wo = Linear(rng, f"{name}.o", d, d)

    def _split(self, x: Tensor) -> Tensor:
        # (..., S, D) -> (..., heads, S, dh)
        s = x.shape[-2]
        dh = self.d // self.heads
        return ad.swapaxes(x.reshape(x.shape[:-2] + (s, self.heads, dh)), -3, -2)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        dh = self.d // self.heads
        q = self._split(self.wq(q_tokens))
        k = self._split(self.wk(kv_tokens))
        v = self._split(self.wv(kv_tokens))
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / float(np.sqrt(dh)))
        weights = ad.softmax_last(scores)
        ctx = ad.matmul(weights, v)  # (..., heads, S_q, dh)
        merged = ad.swapaxes(ctx, -3, -2)
        merged = merged.reshape(merged.shape[:-2] + (self.d,))
        return self.wo(merged)

    def params(self) -> dict[str, Tensor]:
        return {**self.wq.params(), **self.wk.params(),
                **self.wv.params(), **self.wo.params()}


class TransformerBlock:
    """Pre-norm block: x += attn(LN(x), LN(kv)); x += mlp(LN(x)).

    Pre-norm keeps token magnitudes in the residual stream, which is what
    carries reconstruction-error strength to the readout.
    """

    def __init__(self, rng: CounterRng, name: str, d: int, heads: int, mlp_hidden: int):
        self.attn = MultiHeadAttention(rng, f"{name}.attn", d, heads)
        self.norm1 = LayerNormParams(rng, f"{name}.norm1", d)
        self.mlp = Mlp(rng, f"{name}.mlp", d, mlp_hidden)
        self.norm2 = LayerNormParams(rng, f"{name}.norm2", d)

    def __call__(self, q_tokens: Tensor, kv_tokens: Optional[Tensor] = None) -> Tensor:
        kv_normed = self.norm1(q_tokens) if kv_tokens is None else self.norm1(kv_tokens)
        q_normed = kv_normed if kv_tokens is None else self.norm1(q_tokens)
        x = ad.add(q_tokens, self.attn(q_normed, kv_normed))
        return ad.add(x, self.mlp(self.norm2(x)))

    def params(self) -> dict[str, Tensor]:
        return {**self.attn.params(), **self.norm1.params(),
                **self.mlp.params(), **self.norm2.params()}


class Conv2d:
    def __init__(self, rng: CounterRng, name: str, cin: int, cout: int,
                 k: int, stride: int, pad: int, transpose: bool = False):
        scale = 1.0 / np.sqrt(k * k * cin)
        self.w = init_param(rng, f"{name}.w", (k, k, cin, cout), scale=scale)
        self.b = init_param(rng, f"{name}.b", (cout,), fill=0.0)
        self.stride = stride
        self.pad = pad
        self.transpose = transpose
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        op = ad.conv2d_transpose if self.transpose else ad.conv2d
        return op(x, self.w, self.b, self.stride, self.pad)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}
