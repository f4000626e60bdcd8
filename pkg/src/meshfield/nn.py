"""Small neural-network substrate: MLPs with skip inputs, sine-cosine
encodings, a gradient tape, Adam, and a binary checkpoint format.

Reverse-mode differentiation is delegated to torch autograd; everything
runs in float64 on the CPU.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

DTYPE = torch.float64
SOFTPLUS_BETA = 100.0


class SineCosineEncoding:
    """``x -> [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]``."""

    def __init__(self, octaves: int, include_input: bool = True):
        self.octaves = octaves
        self.include_input = include_input

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.octaves + int(self.include_input))

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        parts = [x] if self.include_input else []
        for level in range(self.octaves):
            arg = (2.0 ** level) * math.pi * x
            parts += [torch.sin(arg), torch.cos(arg)]
        return torch.cat(parts, dim=-1)


def encode(enc: SineCosineEncoding, x) -> torch.Tensor:
    return enc(torch.as_tensor(x, dtype=DTYPE))


class Mlp(nn.Module):
    """Fully connected network with ``n_layers`` hidden layers.

    ``skip`` lists linear-layer indices whose input is ``cat(h, x) / sqrt(2)``
    with ``x`` the network input. ``init`` is one of ``"xavier"``,
    ``"geometric"`` (output approximates the SDF of a sphere of radius
    ``radius``; ``inside_out`` flips the sign), ``"zero_last"`` (xavier
    hidden layers, zero output layer) or ``"identity"``.
    """

    def __init__(
        self,
        d_in: int,
        d_out: int,
        d_hidden: int = 256,
        n_layers: int = 8,
        skip: Sequence[int] = (),
        activation: str = "softplus",
        output_activation: str | None = None,
        init: str = "xavier",
        radius: float = 0.5,
        inside_out: bool = False,
        n_raw: int = 3,
        seed: int = 0,
    ):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.skip = tuple(skip)
        self.activation = activation
        self.output_activation = output_activation
        dims = [d_in] + [d_hidden] * n_layers + [d_out]
        self.layers = nn.ModuleList()
        for i in range(n_layers + 1):
            fan_in = dims[i] + (d_in if i in self.skip else 0)
            self.layers.append(nn.Linear(fan_in, dims[i + 1], dtype=DTYPE))
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self._initialise(init, dims, radius, inside_out, n_raw, gen)

    def _initialise(self, init, dims, radius, inside_out, n_raw, gen):
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            w, b = lin.weight, lin.bias
            b.zero_()
            if init == "identity":
                if w.shape[0] != w.shape[1]:
                    raise ValueError("identity init needs square layers")
                w.copy_(torch.eye(w.shape[0], dtype=DTYPE))
            elif init == "geometric":
                if i == last:
                    mean = math.sqrt(math.pi) / math.sqrt(w.shape[1])
                    w.normal_(-mean if inside_out else mean, 1e-4, generator=gen)
                    b.fill_(radius if inside_out else -radius)
                else:
                    w.normal_(0.0, math.sqrt(2) / math.sqrt(w.shape[0]), generator=gen)
                    # encoded (non-raw) inputs start switched off
                    if i == 0 and dims[0] > n_raw:
                        w[:, n_raw:] = 0.0
                    if i in self.skip and dims[0] > n_raw:
                        w[:, -(dims[0] - n_raw):] = 0.0
            elif init in ("xavier", "zero_last"):
                if init == "zero_last" and i == last:
                    w.zero_()
                else:
                    bound = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
                    w.uniform_(-bound, bound, generator=gen)
            else:
                raise ValueError(f"unknown init {init!r}")

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _act(self, h):
        if self.activation == "softplus":
            return nn.functional.softplus(h, beta=SOFTPLUS_BETA)
        if self.activation == "relu":
            return torch.relu(h)
        if self.activation in ("none", "identity"):
            return h
        raise ValueError(self.activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected input dimension {self.d_in}, got {x.shape[-1]}")
        h = x
        last = len(self.layers) - 1
        for i, lin in enumerate(self.layers):
            if i in self.skip:
                h = torch.cat([h, x], dim=-1) / math.sqrt(2)
            h = lin(h)
            if i < last:
                h = self._act(h)
        if self.output_activation == "sigmoid":
            h = torch.sigmoid(h)
        elif self.output_activation is not None:
            raise ValueError(self.output_activation)
        return h


def mlp_parameter_count(d_in, d_out, d_hidden, n_layers, skip=()) -> int:
    dims = [d_in] + [d_hidden] * n_layers + [d_out]
    return sum((dims[i] + (d_in if i in skip else 0)) * dims[i + 1] + dims[i + 1] for i in range(n_layers + 1))


class TapeError(RuntimeError):
    pass


class Tape:
    """Records forward passes so one backward call can propagate into parameters.

    A tape is single-use: ``backward`` frees the recorded graph.
    """

    def __init__(self):
        self._outputs: list[torch.Tensor] = []
        self._inputs: list[torch.Tensor] = []
        self.consumed = False

    def watch(self, x: torch.Tensor) -> torch.Tensor:
        x = x.detach().clone().requires_grad_(True)
        self._inputs.append(x)
        return x

    def record(self, out: torch.Tensor) -> torch.Tensor:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        self._outputs.append(out)
        return out

    def backward(self, output_gradient=None) -> list[torch.Tensor | None]:
        """Accumulate gradients into ``.grad`` of every leaf; returns input gradients."""
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        if not self._outputs:
            raise TapeError("nothing recorded")
        outs = self._outputs
        if output_gradient is None:
            grads = [torch.ones_like(o) for o in outs]
        elif len(outs) == 1:
            grads = [torch.as_tensor(output_gradient, dtype=DTYPE).reshape(outs[0].shape)]
        else:
            grads = [torch.as_tensor(g, dtype=DTYPE) for g in output_gradient]
        torch.autograd.backward(outs, grads)
        self.consumed = True
        self._outputs = []
        return [x.grad for x in self._inputs]


def mlp_forward(net: Mlp, x, tape: Tape | None = None) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if not torch.all(torch.isfinite(x)):
        raise ValueError("non-finite input")
    if tape is None:
        with torch.no_grad():
            return net(x)
    return tape.record(net(tape.watch(x)))


# --- optimiser -----------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict | None = None) -> bool:
    """Bias-corrected Adam update in place. Returns False (and skips) on non-finite gradients."""
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not torch.all(torch.isfinite(g)):
            log.warning("non-finite gradient in %s; skipping optimiser step %d", name, state.step + 1)
            return False
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            lr = state.lr * state.lr_scale.get(name, 1.0)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + state.eps))
    return True


# --- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"MFCKPT\x00\x00"
CKPT_VERSION = 1


def _write_tensor(fh, name: str, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    raw = name.encode()
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_tensor(fh):
    (n,) = struct.unpack("<H", fh.read(2))
    name = fh.read(n).decode()
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def save_checkpoint(path, tensors: dict, meta: dict, adam: AdamState | None = None) -> None:
    """Header, JSON metadata, named float64 tensors, then the optional Adam state."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        _write_tensor(buf, name, _np(arr))
    buf.write(struct.pack("<B", adam is not None))
    if adam is not None:
        buf.write(struct.pack("<4dQ", adam.lr, adam.beta1, adam.beta2, adam.eps, adam.step))
        buf.write(struct.pack("<I", len(adam.m)))
        for name in adam.m:
            _write_tensor(buf, name, _np(adam.m[name]))
            _write_tensor(buf, name, _np(adam.v[name]))
        scales = json.dumps(adam.lr_scale, sort_keys=True).encode()
        buf.write(struct.pack("<Q", len(scales)))
        buf.write(scales)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(n))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(count))
        adam = None
        (has_adam,) = struct.unpack("<B", fh.read(1))
        if has_adam:
            lr, b1, b2, eps, step = struct.unpack("<4dQ", fh.read(40))
            adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
            (count,) = struct.unpack("<I", fh.read(4))
            for _ in range(count):
                name, m = _read_tensor(fh)
                _, v = _read_tensor(fh)
                adam.m[name] = torch.from_numpy(m)
                adam.v[name] = torch.from_numpy(v)
            (n,) = struct.unpack("<Q", fh.read(8))
            adam.lr_scale = json.loads(fh.read(n))
    return tensors, meta, adam


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def named_parameters(modules: dict[str, nn.Module], extra: Iterable[tuple[str, torch.Tensor]] = ()) -> dict:
    params = {}
    for prefix, mod in modules.items():
        for name, p in mod.named_parameters():
            params[f"{prefix}.{name}"] = p
    params.update(dict(extra))
    return params
