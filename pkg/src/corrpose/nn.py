"""Parameter storage, shared-weight MLPs, Adam updates and checkpoint files."""

from __future__ import annotations

import io
from typing import Iterator

import numpy as np

from .autodiff import Tensor, ShapeError, add, matmul, relu


class MissingGradError(RuntimeError):
    """adam_step was called while some parameter has no gradient."""


class ParameterStore:
    """Ordered name -> Tensor map with per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m1: dict[str, np.ndarray] = {}
        self._m2: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        self._m1[name] = np.zeros_like(t.data)
        self._m2[name] = np.zeros_like(t.data)
        self._steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flatten parameters plus optimizer state into named arrays."""
        out: dict[str, np.ndarray] = {}
        for name, t in self._params.items():
            out[name] = t.data
            out[name + ".m1"] = self._m1[name]
            out[name + ".m2"] = self._m2[name]
            out[name + ".step"] = np.array([float(self._steps[name])])
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            for key in (name, name + ".m1", name + ".m2", name + ".step"):
                if key not in arrays:
                    raise KeyError(f"checkpoint is missing record {key!r}")
            if arrays[name].shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint record {name!r} has shape {arrays[name].shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = arrays[name].astype(np.float64).copy()
            self._m1[name] = arrays[name + ".m1"].astype(np.float64).reshape(t.data.shape).copy()
            self._m2[name] = arrays[name + ".m2"].astype(np.float64).reshape(t.data.shape).copy()
            self._steps[name] = int(arrays[name + ".step"].reshape(-1)[0])


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_mlp(
    store: ParameterStore,
    prefix: str,
    sizes: list[int],
    rng: np.random.Generator,
    final_bias: np.ndarray | None = None,
) -> None:
    """Register an MLP of affine layers sizes[0] -> ... -> sizes[-1].

    ReLU is applied between layers at forward time, never after the last.
    Hidden layers use He-scaled uniform init so activations keep their
    variance through the ReLUs (plain Xavier shrinks deep stacks until the
    attention logits vanish); output layers use Xavier.  final_bias, when
    given, seeds the last layer's bias (e.g. an identity rotation prior
    for a 6-number rotation head).
    """
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least one layer")
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        init = xavier_uniform if last else he_uniform
        store.add(f"{prefix}.{i}.w", init(rng, sizes[i], sizes[i + 1]))
        bias = np.zeros((1, sizes[i + 1]))
        if final_bias is not None and last:
            bias = np.asarray(final_bias, dtype=np.float64).reshape(1, -1).copy()
        store.add(f"{prefix}.{i}.b", bias)


def mlp_layer_count(store: ParameterStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.w" in store:
        n += 1
    return n


def mlp_forward(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    """Apply the MLP registered under prefix row-wise to x (N x Cin)."""
    n_layers = mlp_layer_count(store, prefix)
    if n_layers == 0:
        raise KeyError(f"no MLP registered under prefix {prefix!r}")
    h = x
    for i in range(n_layers):
        w = store[f"{prefix}.{i}.w"]
        b = store[f"{prefix}.{i}.b"]
        if h.data.shape[1] != w.data.shape[0]:
            raise ShapeError(
                f"{prefix} layer {i} expects width {w.data.shape[0]}, "
                f"got {h.data.shape[1]}"
            )
        h = add(matmul(h, w), b)
        if i < n_layers - 1:
            h = relu(h)
    return h


def adam_step(
    store: ParameterStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected adaptive update; consumes and clears all grads."""
    b1, b2 = betas
    for name, p in store.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    for name, p in store.items():
        g = p.grad
        t = store._steps[name] + 1
        store._steps[name] = t
        m1 = store._m1[name]
        m2 = store._m2[name]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * (g * g)
        mhat = m1 / (1.0 - b1**t)
        vhat = m2 / (1.0 - b2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        p.grad = None


# ---------------------------------------------------------------------------
# checkpoint container: plain-text header + raw little-endian float64 payload

_MAGIC = "floatstore 1"


def write_container(path, arrays: dict[str, np.ndarray]) -> None:
    header = io.StringIO()
    header.write(_MAGIC + "\n")
    header.write(f"n {len(arrays)}\n")
    payloads: list[bytes] = []
    offset = 0
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"record name may not contain whitespace: {name!r}")
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        dims = ",".join(str(d) for d in arr.shape) or "scalar"
        header.write(f"{name} {dims} {offset} {len(raw)}\n")
        payloads.append(raw)
        offset += len(raw)
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for raw in payloads:
            fh.write(raw)


def read_container(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    text_end = 0
    lines = []
    for raw_line in blob.split(b"\n"):
        lines.append(raw_line.decode("ascii"))
        text_end += len(raw_line) + 1
        if lines[-1] == "end":
            break
    else:
        raise ValueError("container header has no end marker")
    if lines[0] != _MAGIC:
        raise ValueError(f"bad container magic: {lines[0]!r}")
    count = int(lines[1].split()[1])
    records = lines[2:-1]
    if len(records) != count:
        raise ValueError(f"header lists {len(records)} records, expected {count}")
    payload = blob[text_end:]
    out: dict[str, np.ndarray] = {}
    for rec in records:
        name, dims, offset, length = rec.rsplit(" ", 3)
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
        start = int(offset)
        arr = np.frombuffer(payload[start:start + int(length)], dtype="<f8")
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def save_checkpoint(store: ParameterStore, path) -> None:
    write_container(path, store.state_arrays())


def load_checkpoint(store: ParameterStore, path) -> None:
    store.load_state(read_container(path))
