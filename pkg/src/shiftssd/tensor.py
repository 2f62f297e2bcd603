"""Minimal reverse-mode autodiff over dense 2-D float64 matrices.

Every operation allocates a fresh node holding its values, a zero
gradient buffer, and a closure that scatters the upstream gradient into
the node's parents. ``Tensor.backward()`` replays the closures in
reverse topological order. Shapes are strictly 2-D (vectors are lifted
to a single row); there is no general broadcasting, only the explicit
helpers ``repeat_rows`` and ``scale_rows``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """Dense 2-D float64 value paired with a same-shape gradient buffer."""

    __slots__ = ("values", "grad", "_parents", "_backprop")

    def __init__(self, values, parents=(), backprop=None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensor must be at most 2-D, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise ValueError("non-finite values in tensor")
        self.values = arr
        self.grad = np.zeros_like(arr)
        self._parents = tuple(parents)
        self._backprop = backprop

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable node's grad.

        Without an explicit seed the output must be a scalar (1x1).
        """
        if seed is None:
            if self.values.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            seed = np.ones_like(self.values)
        self.grad = self.grad + np.asarray(seed, dtype=np.float64).reshape(self.values.shape)
        for node in _topo_from(self):
            if node._backprop is not None:
                node._backprop()

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape})"


def _topo_from(root: Tensor) -> list[Tensor]:
    """Nodes in an order where every node precedes its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad[...] = 0.0


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.values + b.values, parents=(a, b))

    def _bp():
        a.grad += out.grad
        b.grad += out.grad

    out._backprop = _bp
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.values - b.values, parents=(a, b))

    def _bp():
        a.grad += out.grad
        b.grad -= out.grad

    out._backprop = _bp
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.values * b.values, parents=(a, b))

    def _bp():
        a.grad += out.grad * b.values
        b.grad += out.grad * a.values

    out._backprop = _bp
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.values * c, parents=(a,))

    def _bp():
        a.grad += out.grad * c

    out._backprop = _bp
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.values), parents=(a,))

    def _bp():
        a.grad += out.grad * out.values

    out._backprop = _bp
    return out


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.values), parents=(a,))

    def _bp():
        a.grad += out.grad * -np.sin(a.values)

    out._backprop = _bp
    return out


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.values), parents=(a,))

    def _bp():
        a.grad += out.grad * np.cos(a.values)

    out._backprop = _bp
    return out


def absolute(a: Tensor) -> Tensor:
    """|a| elementwise; subgradient at 0 is 0."""
    out = Tensor(np.abs(a.values), parents=(a,))

    def _bp():
        a.grad += out.grad * np.sign(a.values)

    out._backprop = _bp
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(1.0 / (1.0 + np.exp(-a.values)), parents=(a,))

    def _bp():
        a.grad += out.grad * out.values * (1.0 - out.values)

    out._backprop = _bp
    return out


def relu(a: Tensor) -> Tensor:
    """max(0, a) elementwise; subgradient at 0 is 0."""
    out = Tensor(np.maximum(a.values, 0.0), parents=(a,))

    def _bp():
        a.grad += out.grad * (a.values > 0.0)

    out._backprop = _bp
    return out


def avg2(a: Tensor, b: Tensor) -> Tensor:
    """(a + b) / 2; backward sends half the gradient to each input."""
    _check_same_shape(a, b, "avg2")
    out = Tensor(0.5 * (a.values + b.values), parents=(a, b))

    def _bp():
        a.grad += 0.5 * out.grad
        b.grad += 0.5 * out.grad

    out._backprop = _bp
    return out


def min2(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient routes to the smaller input, ties to a."""
    _check_same_shape(a, b, "min2")
    take_a = a.values <= b.values
    out = Tensor(np.where(take_a, a.values, b.values), parents=(a, b))

    def _bp():
        a.grad += out.grad * take_a
        b.grad += out.grad * ~take_a

    out._backprop = _bp
    return out


# ---------------------------------------------------------------------------
# structural ops


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_cols: empty input")
    rows = parts[0].shape[0]
    for p in parts[1:]:
        if p.shape[0] != rows:
            raise ValueError(f"concat_cols: row-count mismatch {p.shape[0]} vs {rows}")
    out = Tensor(np.concatenate([p.values for p in parts], axis=1), parents=tuple(parts))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def _bp():
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += out.grad[:, j0:j1]

    out._backprop = _bp
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[1]):
        raise ValueError(f"slice_cols: [{start}:{stop}] out of range for width {a.shape[1]}")
    out = Tensor(a.values[:, start:stop].copy(), parents=(a,))

    def _bp():
        a.grad[:, start:stop] += out.grad

    out._backprop = _bp
    return out


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row gather; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather_rows: index out of range for {n} rows")
    out = Tensor(a.values[idx], parents=(a,))

    def _bp():
        np.add.at(a.grad, idx, out.grad)

    out._backprop = _bp
    return out


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Each row repeated k times in place: row i maps to rows i*k..i*k+k-1."""
    if k < 1:
        raise ValueError("repeat_rows: k must be >= 1")
    m, c = a.shape
    out = Tensor(np.repeat(a.values, k, axis=0), parents=(a,))

    def _bp():
        a.grad += out.grad.reshape(m, k, c).sum(axis=1)

    out._backprop = _bp
    return out


def row_sum(a: Tensor) -> Tensor:
    """Sum over columns, keeping an Mx1 shape."""
    out = Tensor(a.values.sum(axis=1, keepdims=True), parents=(a,))

    def _bp():
        a.grad += out.grad

    out._backprop = _bp
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor([[a.values.sum()]], parents=(a,))

    def _bp():
        a.grad += out.grad[0, 0]

    out._backprop = _bp
    return out


def mean_all(a: Tensor) -> Tensor:
    if a.values.size == 0:
        raise ValueError("mean_all: empty tensor")
    out = Tensor([[a.values.mean()]], parents=(a,))

    def _bp():
        a.grad += out.grad[0, 0] / a.values.size

    out._backprop = _bp
    return out


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a (MxC) by scalar s[i] (Mx1)."""
    if s.shape != (a.shape[0], 1):
        raise ValueError(f"scale_rows: scales must be {(a.shape[0], 1)}, got {s.shape}")
    out = Tensor(a.values * s.values, parents=(a, s))

    def _bp():
        a.grad += out.grad * s.values
        s.grad += (out.grad * a.values).sum(axis=1, keepdims=True)

    out._backprop = _bp
    return out


def reduce_max(x: Tensor, group_size: int, valid) -> Tensor:
    """Masked max over fixed-size row groups.

    x is (M*K)xC with rows grouped in blocks of K; valid is an MxK mask
    with at least one true entry per group. Gradient routes to the
    argmax row of each (group, channel); ties go to the smallest row
    index inside the group. Invalid rows never win.
    """
    rows, c = x.shape
    if group_size < 1 or rows % group_size:
        raise ValueError(f"reduce_max: {rows} rows not divisible into groups of {group_size}")
    m = rows // group_size
    mask = np.asarray(valid, dtype=bool)
    if mask.shape != (m, group_size):
        raise ValueError(f"reduce_max: valid mask must be {(m, group_size)}, got {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("reduce_max: fully-invalid group")
    grouped = x.values.reshape(m, group_size, c)
    masked = np.where(mask[:, :, None], grouped, -np.inf)
    arg = masked.argmax(axis=1)  # (m, c); argmax picks the smallest index on ties
    out_vals = np.take_along_axis(grouped, arg[:, None, :], axis=1)[:, 0, :]
    out = Tensor(out_vals, parents=(x,))

    def _bp():
        flat_rows = (np.arange(m)[:, None] * group_size + arg).ravel()
        flat_cols = np.tile(np.arange(c), m)
        np.add.at(x.grad, (flat_rows, flat_cols), out.grad.ravel())

    out._backprop = _bp
    return out


# ---------------------------------------------------------------------------
# parameterized layers


@dataclass
class LinearParams:
    """Affine map parameters: weight is C_out x C_in, bias 1 x C_out."""

    weight: Tensor
    bias: Tensor

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class MlpParams:
    """Stack of linear layers with ReLU after each, optionally skipping the last."""

    layers: list[LinearParams]
    final_relu: bool = True

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_width != nxt.in_width:
                raise ValueError(
                    f"mlp widths do not chain: {prev.out_width} -> {nxt.in_width}"
                )

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]


def init_linear(c_in: int, c_out: int, rng: np.random.Generator) -> LinearParams:
    """Uniform fan-in init: all entries drawn from +-sqrt(1/C_in)."""
    bound = float(np.sqrt(1.0 / c_in))
    w = rng.uniform(-bound, bound, size=(c_out, c_in))
    b = rng.uniform(-bound, bound, size=(1, c_out))
    return LinearParams(weight=Tensor(w), bias=Tensor(b))


def init_mlp(widths: Sequence[int], rng: np.random.Generator, final_relu: bool = True) -> MlpParams:
    if len(widths) < 2:
        raise ValueError("mlp needs at least input and output widths")
    layers = [init_linear(a, b, rng) for a, b in zip(widths, widths[1:])]
    return MlpParams(layers=layers, final_relu=final_relu)


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """x @ W^T + b for x of shape NxC_in."""
    if x.shape[1] != p.in_width:
        raise ValueError(f"linear: input width {x.shape[1]} != weight width {p.in_width}")
    out = Tensor(x.values @ p.weight.values.T + p.bias.values, parents=(x, p.weight, p.bias))

    def _bp():
        x.grad += out.grad @ p.weight.values
        p.weight.grad += out.grad.T @ x.values
        p.bias.grad += out.grad.sum(axis=0, keepdims=True)

    out._backprop = _bp
    return out


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    h = x
    last = len(p.layers) - 1
    for i, layer in enumerate(p.layers):
        h = linear(h, layer)
        if i < last or p.final_relu:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    f must be a deterministic closure over `params` returning a 1x1
    tensor. Returns the worst relative error over every parameter
    coordinate, with the denominator floored at 1 so near-zero gradients
    compare absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    zero_grads(params)
    out = f()
    out.backward()
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = f().item()
            flat[i] = orig - eps
            f_lo = f().item()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON header line, then the flat little-endian float64 stream


def save_checkpoint(path, named_tensors: Sequence[tuple[str, Tensor]], meta: dict | None = None) -> None:
    header = {
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in named_tensors],
        "meta": meta or {},
    }
    blob = b"".join(
        np.ascontiguousarray(t.values, dtype="<f8").tobytes() for _, t in named_tensors
    )
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ValueError(f"corrupt checkpoint header in {path}: {err}") from err
        blob = fh.read()
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        rows, cols = entry["shape"]
        count = rows * cols
        if offset + count * 8 > len(blob):
            raise ValueError(f"checkpoint {path} truncated at tensor {entry['name']}")
        chunk = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[entry["name"]] = chunk.reshape(rows, cols).astype(np.float64)
        offset += count * 8
    if offset != len(blob):
        raise ValueError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    return arrays, header.get("meta", {})


def load_into(named_tensors: Sequence[tuple[str, Tensor]], arrays: dict[str, np.ndarray]) -> None:
    for name, t in named_tensors:
        if name not in arrays:
            raise ValueError(f"checkpoint missing tensor {name}")
        arr = arrays[name]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {t.shape}")
        t.values[...] = arr
