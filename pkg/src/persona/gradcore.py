"""Named parameter store, reverse-mode gradients, numeric checking, Adam.

Reverse-mode differentiation itself is delegated to torch's tape; this module
pins down everything around it that the rest of the engine relies on: a flat
namespace of leaf tensors with trainable flags, a `backward` that never
half-writes gradients, an independent central-difference checker, and an Adam
whose moments are keyed by name so they survive point-count changes.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np
import torch


class GradError(RuntimeError):
    """Raised for non-finite losses, graph misuse, and shape violations."""


class ParamStore:
    """Flat registry of named leaf tensors.

    Shapes are fixed at registration; ``replace`` is the one sanctioned way to
    change a tensor's shape (point upsampling and pruning go through it, and
    the optimizer is told to remap its moments alongside).
    """

    def __init__(self) -> None:
        self._params: dict[str, torch.Tensor] = {}

    def register(
        self, name: str, value: torch.Tensor | np.ndarray, trainable: bool = True
    ) -> torch.Tensor:
        if name in self._params:
            raise GradError(f"parameter {name!r} already registered")
        t = torch.as_tensor(value).detach().clone()
        if trainable and not t.is_floating_point():
            raise GradError(f"trainable parameter {name!r} must be floating point")
        t.requires_grad_(trainable)
        self._params[name] = t
        return t

    def replace(
        self, name: str, value: torch.Tensor | np.ndarray, trainable: bool | None = None
    ) -> torch.Tensor:
        """Swap a tensor for a new one (shape may change)."""
        old = self[name]
        if trainable is None:
            trainable = old.requires_grad
        t = torch.as_tensor(value).detach().clone()
        t.requires_grad_(trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise GradError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, torch.Tensor]]:
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self[name].requires_grad

    def set_trainable(self, name: str, flag: bool) -> None:
        self[name].requires_grad_(flag)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self._params.items() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def export(self) -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy().copy() for n, p in self._params.items()}

    def load(self, tensors: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy values into existing parameters, reshaping via replace."""
        for name, arr in tensors.items():
            if name not in self._params:
                if strict:
                    raise GradError(f"checkpoint has unknown parameter {name!r}")
                continue
            old = self._params[name]
            if tuple(arr.shape) != tuple(old.shape):
                self.replace(name, torch.as_tensor(arr, dtype=old.dtype))
            else:
                with torch.no_grad():
                    old.copy_(torch.as_tensor(arr, dtype=old.dtype))


def backward(
    loss: torch.Tensor, store: ParamStore, names: list[str] | None = None
) -> dict[str, torch.Tensor]:
    """Gradients of a scalar loss w.r.t. trainable store entries.

    The loss is validated before any gradient is produced, so a non-finite
    forward pass never leaves partial results behind. Parameters that do not
    participate in the graph get zero gradients.
    """
    if not isinstance(loss, torch.Tensor) or loss.dim() != 0:
        raise GradError("loss must be a scalar tensor")
    if not bool(torch.isfinite(loss)):
        raise GradError(f"non-finite loss {loss.item()!r}")
    if names is None:
        names = store.trainable_names()
    params = [store[n] for n in names]
    for n, p in zip(names, params):
        if not p.requires_grad:
            raise GradError(f"parameter {n!r} is frozen")
    if not loss.requires_grad:
        raise GradError("loss does not depend on any trainable parameter")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out: dict[str, torch.Tensor] = {}
    for n, p, g in zip(names, params, grads):
        out[n] = torch.zeros_like(p) if g is None else g.detach()
    return out


@dataclasses.dataclass
class GradEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)

    def rel_err(self, floor: float = 1e-5) -> float:
        return self.abs_err / max(abs(self.analytic), abs(self.numeric), floor)


@dataclasses.dataclass
class GradReport:
    """Outcome of a finite-difference check, one row per tested entry."""

    entries: list[GradEntry]
    loss_value: float

    def max_abs_err(self) -> float:
        return max((e.abs_err for e in self.entries), default=0.0)

    def max_rel_err(self, floor: float = 1e-5) -> float:
        return max((e.rel_err(floor) for e in self.entries), default=0.0)

    def worst(self, floor: float = 1e-5) -> GradEntry | None:
        return max(self.entries, key=lambda e: e.rel_err(floor), default=None)

    def ok(self, rtol: float = 1e-4, floor: float = 1e-5) -> bool:
        return self.max_rel_err(floor) < rtol

    def summary(self, floor: float = 1e-5) -> str:
        w = self.worst(floor)
        if w is None:
            return "no entries checked"
        return (
            f"{len(self.entries)} entries, max rel err {self.max_rel_err(floor):.3e} "
            f"at {w.name}{list(w.index)} (analytic {w.analytic:.6e}, numeric {w.numeric:.6e})"
        )


def _default_eps_scale(dtype: torch.dtype) -> float:
    return 1e-5 if dtype == torch.float64 else 3e-3


def grad_check(
    f: Callable[[], torch.Tensor],
    store: ParamStore,
    names: list[str] | None = None,
    eps_scale: float | None = None,
    max_entries_per_param: int = 64,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must rebuild its graph from the store's current values on every
    call and be bitwise deterministic; the check refuses to run otherwise.
    Large tensors are sampled (seeded via ``rng``) rather than swept.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if names is None:
        names = store.trainable_names()

    v1 = f()
    v2 = f()
    if v1.detach().cpu().numpy().tobytes() != v2.detach().cpu().numpy().tobytes():
        raise GradError("f() is not deterministic; finite differences would be meaningless")
    analytic = backward(v1, store, names)
    loss_value = float(v1.detach())

    entries: list[GradEntry] = []
    for name in names:
        p = store[name]
        scale = eps_scale if eps_scale is not None else _default_eps_scale(p.dtype)
        numel = p.numel()
        if numel <= max_entries_per_param:
            flat_idx = np.arange(numel)
        else:
            flat_idx = rng.choice(numel, size=max_entries_per_param, replace=False)
            flat_idx.sort()
        flat = p.detach().view(-1)
        a_flat = analytic[name].reshape(-1)
        for i in flat_idx:
            i = int(i)
            x0 = flat[i].item()
            eps = scale * max(1.0, abs(x0))
            with torch.no_grad():
                flat[i] = x0 + eps
            f_plus = float(f().detach())
            with torch.no_grad():
                flat[i] = x0 - eps
            f_minus = float(f().detach())
            with torch.no_grad():
                flat[i] = x0
            numeric = (f_plus - f_minus) / (2.0 * eps)
            index = np.unravel_index(i, p.shape) if p.dim() else ()
            entries.append(
                GradEntry(
                    name=name,
                    index=tuple(int(j) for j in index),
                    analytic=float(a_flat[i]),
                    numeric=numeric,
                )
            )
    return GradReport(entries=entries, loss_value=loss_value)


class Adam:
    """Adam with name-keyed state and explicit moment remapping.

    Learning rates are per-name (a scalar applies to everything); the trainer
    scales them globally via ``lr_scale`` for step decay. ``remap`` reindexes
    the leading axis of a parameter's moments when the point set changes:
    surviving rows keep their history, appended rows start cold.
    """

    def __init__(
        self,
        store: ParamStore,
        lr: float | Mapping[str, float] = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.store = store
        self._lr = dict(lr) if isinstance(lr, Mapping) else float(lr)
        self.lr_scale = 1.0
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict[str, torch.Tensor | int]] = {}

    def lr_for(self, name: str) -> float:
        if isinstance(self._lr, dict):
            if name not in self._lr:
                raise GradError(f"no learning rate configured for {name!r}")
            base = self._lr[name]
        else:
            base = self._lr
        return base * self.lr_scale

    def set_lr(self, name: str, lr: float) -> None:
        if not isinstance(self._lr, dict):
            self._lr = {}
        self._lr[name] = float(lr)

    def step(self, grads: Mapping[str, torch.Tensor]) -> None:
        for name, g in grads.items():
            p = self.store[name]
            if not p.requires_grad:
                continue
            st = self.state.get(name)
            if st is None:
                st = {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "t": 0}
                self.state[name] = st
            st["t"] = int(st["t"]) + 1
            t = st["t"]
            m, v = st["m"], st["v"]
            with torch.no_grad():
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                m_hat = m / (1.0 - self.beta1**t)
                v_hat = v / (1.0 - self.beta2**t)
                p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-self.lr_for(name))

    def remap(self, name: str, survivors: torch.Tensor | np.ndarray, new_count: int) -> None:
        """Reindex leading-axis moments after a point-set change.

        ``survivors`` are old-row indices that remain, packed to the front of
        the new tensor; rows ``len(survivors)..new_count`` are fresh points.
        """
        st = self.state.get(name)
        if st is None:
            return
        idx = torch.as_tensor(np.asarray(survivors), dtype=torch.long)
        for key in ("m", "v"):
            old = st[key]
            fresh = torch.zeros((new_count,) + tuple(old.shape[1:]), dtype=old.dtype)
            fresh[: idx.numel()] = old[idx]
            st[key] = fresh

    def drop(self, name: str) -> None:
        self.state.pop(name, None)

    def export(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        tensors: dict[str, np.ndarray] = {}
        steps: dict[str, int] = {}
        for name, st in self.state.items():
            tensors[f"adam.m.{name}"] = st["m"].cpu().numpy().copy()
            tensors[f"adam.v.{name}"] = st["v"].cpu().numpy().copy()
            steps[name] = int(st["t"])
        return tensors, steps

    def load(self, tensors: Mapping[str, np.ndarray], steps: Mapping[str, int]) -> None:
        self.state = {}
        for name, t in steps.items():
            p = self.store[name]
            m = torch.as_tensor(tensors[f"adam.m.{name}"], dtype=p.dtype)
            v = torch.as_tensor(tensors[f"adam.v.{name}"], dtype=p.dtype)
            if m.shape != p.shape or v.shape != p.shape:
                raise GradError(f"optimizer state shape mismatch for {name!r}")
            self.state[name] = {"m": m, "v": v, "t": int(t)}


def mlp_param_count(widths: list[int]) -> int:
    """Total weight+bias count of a dense ReLU stack, for sizing reports."""
    return sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))
