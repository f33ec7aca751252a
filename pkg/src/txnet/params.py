"""Named parameter storage and deterministic initialization."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import TxNetError
from .ops import Conv2dParams, NormParams
from .tensor import Tensor, _as_dtype

INIT_STD = 0.02


class WeightMismatchError(TxNetError, ValueError):
    """Stored weights do not match the tensors a config requires."""

    def __init__(self, name, message):
        self.name = name
        super().__init__(f"{name}: {message}")


@dataclass
class Entry:
    tensor: Tensor
    init: str
    learnable: bool = True


class ParamStore:
    """Ordered name -> tensor map. Iteration follows registration order."""

    def __init__(self):
        self._entries: OrderedDict[str, Entry] = OrderedDict()

    def add(self, name: str, t: Tensor, init: str, learnable: bool = True) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = Entry(t, init, learnable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, name: str) -> Entry:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name, e in self._entries.items():
            yield name, e.tensor

    def learnable(self) -> Iterator[tuple[str, Tensor]]:
        for name, e in self._entries.items():
            if e.learnable:
                yield name, e.tensor

    def num_params(self) -> int:
        return sum(t.size for _, t in self.learnable())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: t.shape for name, t in self.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}


def name_rng(seed: int, name: str) -> np.random.Generator:
    """Philox stream keyed by (seed, parameter name); independent of build order."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *words])))


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside ±bound·std."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


class ParamFactory:
    """Creates named tensors and registers them in a :class:`ParamStore`.

    ``mode`` is ``"random"`` (seeded init), ``"zeros"`` (cheap shape-only builds)
    or ``"load"`` (take arrays from ``weights``, checking shapes).
    """

    def __init__(self, seed: int = 0, dtype=None, weights: Mapping[str, np.ndarray] | None = None,
                 requires_grad: bool = False, mode: str | None = None):
        self.seed = int(seed)
        self.dtype = _as_dtype(dtype)
        self.weights = weights
        self.requires_grad = requires_grad
        self.mode = mode or ("load" if weights is not None else "random")
        self.store = ParamStore()

    def param(self, name: str, shape, init: str = "trunc_normal", learnable: bool = True) -> Tensor:
        shape = tuple(shape)
        if self.mode == "load":
            if name not in self.weights:
                raise WeightMismatchError(name, "missing from weight file")
            arr = np.asarray(self.weights[name])
            if arr.shape != shape:
                raise WeightMismatchError(name, f"shape {list(arr.shape)} != expected {list(shape)}")
        elif self.mode == "zeros":
            arr = np.zeros(shape)
        elif init == "trunc_normal":
            arr = trunc_normal(name_rng(self.seed, name), shape)
        elif init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(arr, requires_grad=self.requires_grad and learnable, dtype=self.dtype)
        return self.store.add(name, t, init, learnable)

    def check_no_extra(self) -> None:
        if self.mode != "load":
            return
        for name in self.weights:
            if name not in self.store:
                raise WeightMismatchError(name, "not used by this config")


def make_conv(f: ParamFactory, name: str, cin: int, cout: int, k: int, stride: int = 1,
              padding: int = 0, groups: int = 1, bias: bool = True) -> Conv2dParams:
    w = f.param(f"{name}.weight", (cout, cin // groups, k, k))
    b = f.param(f"{name}.bias", (cout,), init="zeros") if bias else None
    return Conv2dParams(cin, cout, k, k, w, b, stride=stride, padding=padding, groups=groups)


def make_dwconv(f: ParamFactory, name: str, c: int, k: int, stride: int = 1,
                padding: int | None = None, bias: bool = True) -> Conv2dParams:
    pad = (k - 1) // 2 if padding is None else padding
    return make_conv(f, name, c, c, k, stride=stride, padding=pad, groups=c, bias=bias)


def make_norm(f: ParamFactory, name: str, c: int, eps: float = 1e-5) -> NormParams:
    return NormParams(
        c,
        scale=f.param(f"{name}.scale", (c,), init="ones"),
        shift=f.param(f"{name}.shift", (c,), init="zeros"),
        running_mean=f.param(f"{name}.running_mean", (c,), init="zeros", learnable=False),
        running_var=f.param(f"{name}.running_var", (c,), init="ones", learnable=False),
        eps=eps,
    )
