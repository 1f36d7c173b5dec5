"""Small layer library on top of the autodiff engine.

Parameters are float32 Tensors with requires_grad=True, initialized uniformly
at scale 1/sqrt(fan_in) from a caller-supplied Generator so builds are
deterministic per seed.
"""

from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    scale = 1.0 / np.sqrt(max(1, fan_in))
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(np.float32), requires_grad=True)


class Module:
    """Base with recursive, insertion-ordered parameter discovery."""

    def named_parameters(self):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters():
                    yield f"{name}.{sub}", p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_parameters():
                            yield f"{name}.{i}.{sub}", p
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "Module":
        return copy.deepcopy(self)

    def to_dtype(self, dtype) -> "Module":
        """Cast all parameters in place; used by float64 gradient checks."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            src = state[name]
            if src.shape != p.data.shape:
                raise ValueError(f"param {name}: shape {src.shape} != {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (d_in, d_out), d_in)
        self.bias = uniform_init(rng, (d_out,), d_in)

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride, padding, rng: np.random.Generator):
        kt, kh, kw = (kernel, kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = c_in * kt * kh * kw
        self.kernels = uniform_init(rng, (c_out, c_in, kt, kh, kw), fan_in)
        self.bias = uniform_init(rng, (c_out,), fan_in)
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        y = ad.conv3d(x, self.kernels, stride=self.stride, padding=self.padding)
        b = ad.reshape(self.bias, (-1, 1, 1, 1))
        return ad.add(y, b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride, padding, rng: np.random.Generator):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = c_in * kh * kw
        self.kernels = uniform_init(rng, (c_out, c_in, kh, kw), fan_in)
        self.bias = uniform_init(rng, (c_out,), fan_in)
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        y = ad.conv2d(x, self.kernels, stride=self.stride, padding=self.padding)
        b = ad.reshape(self.bias, (-1, 1, 1))
        return ad.add(y, b)


class LstmCell(Module):
    """4-gate recurrent cell; weights laid out for autodiff.recurrent_step."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.w_x = uniform_init(rng, (d_in, 4 * d_hidden), d_in)
        self.w_h = uniform_init(rng, (d_hidden, 4 * d_hidden), d_hidden)
        self.bias = Tensor(np.zeros(4 * d_hidden, dtype=np.float32), requires_grad=True)
        self.d_hidden = d_hidden

    def step(self, x, h, c):
        return ad.recurrent_step(x, h, c, self.w_x, self.w_h, self.bias)

    def run(self, xs: Tensor) -> Tensor:
        """Consume xs [B, T, d_in]; return the final hidden state [B, d_hidden]."""
        batch = xs.shape[0]
        zeros = np.zeros((batch, self.d_hidden), dtype=xs.dtype)
        h, c = Tensor(zeros.copy()), Tensor(zeros.copy())
        for t in range(xs.shape[1]):
            h, c = self.step(xs[:, t, :], h, c)
        return h


class SelfAttention(Module):
    """Multi-head scaled dot-product attention over [B, T, d]."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim

    def __call__(self, x) -> Tensor:
        b, t, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x)  # [B, T, 3d]
        qkv = ad.reshape(qkv, (b, t, 3, self.heads, hd))
        qkv = ad.transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, heads, T, hd]
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, v)  # [B, heads, T, hd]
        mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
        return self.out(mixed)


class TransformerBlock(Module):
    """Pre-norm block: LN -> attention -> residual, LN -> MLP(GELU) -> residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.norm2(x)))))


class Mlp(Module):
    """Two-layer GELU MLP, used as the optional distillation projection head."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))
