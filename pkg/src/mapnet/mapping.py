"""Latent-to-parameter generation.

A :class:`MappingState` holds a trainable latent vector ``z`` (length d) and
a fixed mapping matrix ``W0`` (P x d, orthonormal columns).  Every latent
entry ``z_i`` shifts the whole column ``i`` of ``W0`` by ``alpha * z_i``;
the generated parameter vector is::

    theta = out_scale * act(W_mod @ z)        W_mod = W0 + alpha * 1 z^T
          = out_scale * act(W0 @ z + alpha * |z|^2)

so generation never materialises ``W_mod``.  A :class:`MappingPlan` tiles a
target's :class:`~mapnet.zoo.ParameterSpec` with one unit (single latent
vector) or one unit per logical layer (layer-wise).

Latent scale
------------
Because the modulation adds ``alpha * |z|^2`` to *every* generated entry while
``W0 @ z`` only contributes ``~|z| / sqrt(P)``, a latent of unit scale would
bury the signal under a constant offset.  ``z_scale="auto"`` therefore
initialises ``z ~ N(0, z_scale^2)`` with ``z_scale = 1 / sqrt(P d)``, where the
offset starts at ``alpha`` times the spread of ``W0 @ z``.  Optimiser steps,
gradient clipping and stability noise are all measured in units of
``z_scale``; with ``z_scale = 1`` everything reduces to the plain formulas.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .zoo import ParameterSpec, TargetArchitecture, build_spec

ACTIVATIONS = ("tanh", "linear")
VARIANTS = ("mapped", "no_modulation", "lv_wmap", "full_dnn", "lv_full_dnn")

# Householder QR below this many entries, blocked Cholesky-QR above.
_HOUSEHOLDER_LIMIT = 1 << 22
_ROW_BLOCK = 8192


def init_orthogonal(P: int, d: int, seed: int) -> np.ndarray:
    """Fixed mapping matrix with orthonormal columns, stored as float32.

    The matrix is the Q factor of a seeded standard-normal ``P x d`` matrix,
    with signs chosen so that R has a positive diagonal.  Large matrices
    use two rounds of Cholesky-QR over row blocks (float64 accumulation),
    which yields the same factor without holding a float64 copy.
    """
    if not (isinstance(P, (int, np.integer)) and isinstance(d, (int, np.integer))) or d < 1:
        raise ConfigError(f"invalid mapping shape P={P}, d={d}", [("mapping.d", "must be >= 1")])
    if d > P:
        raise ConfigError(f"latent size d={d} exceeds parameter count P={P}", [("mapping.d", f"must be <= P={P}")])
    rng = np.random.default_rng(seed)
    if P * d <= _HOUSEHOLDER_LIMIT:
        a = rng.standard_normal((P, d))
        q, r = np.linalg.qr(a)
        q *= np.where(np.diag(r) < 0, -1.0, 1.0)
        return np.ascontiguousarray(q, dtype=np.float32)
    a = np.empty((P, d), dtype=np.float32)
    for lo in range(0, P, _ROW_BLOCK):
        hi = min(P, lo + _ROW_BLOCK)
        a[lo:hi] = rng.standard_normal((hi - lo, d))
    for _ in range(2):
        # float32 block products, float64 accumulation; the second round
        # restores orthogonality lost to rounding in the first
        gram = np.zeros((d, d))
        for lo in range(0, P, _ROW_BLOCK):
            blk = a[lo:lo + _ROW_BLOCK]
            gram += blk.T @ blk
        r = np.linalg.cholesky(gram).T
        r_inv = np.linalg.solve(r, np.eye(d)).astype(np.float32)
        for lo in range(0, P, _ROW_BLOCK):
            a[lo:lo + _ROW_BLOCK] = a[lo:lo + _ROW_BLOCK] @ r_inv
    return a


def cached_orthogonal(P: int, d: int, seed: int, cache_dir=None) -> np.ndarray:
    """:func:`init_orthogonal` with an optional on-disk cache.

    The cache directory defaults to ``$MAPNET_CACHE``; without either the
    matrix is simply rebuilt.  Cached files are memory-mapped read-only.
    """
    cache_dir = cache_dir or os.environ.get("MAPNET_CACHE")
    if not cache_dir:
        return init_orthogonal(P, d, seed)
    path = os.path.join(cache_dir, f"w0_{P}x{d}_s{seed}.npy")
    if os.path.exists(path):
        arr = np.load(path, mmap_mode="r")
        if arr.shape == (P, d) and arr.dtype == np.float32:
            return arr
    arr = init_orthogonal(P, d, seed)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = f"{path}.{os.getpid()}.tmp"
    with open(tmp, "wb") as fh:
        np.save(fh, arr)
    os.replace(tmp, path)
    return arr


def checksum(arr: np.ndarray) -> str:
    # hash the buffer in place; a tobytes() copy of a large W0 costs seconds
    return hashlib.blake2b(memoryview(np.ascontiguousarray(arr)).cast("B"), digest_size=16).hexdigest()


def _fixed(arr: np.ndarray) -> T.Tensor:
    return T.Tensor._wrap(arr)


def _leaf(arr, name=None) -> T.Tensor:
    return T.Tensor._wrap(np.array(arr, copy=True), requires_grad=True, name=name)


@dataclass
class MappingState:
    """One generator unit.

    ``W0`` is never written after construction; ``z`` is replaced by a new
    leaf tensor after each optimiser step.  ``wmap`` (a second trainable
    vector standing in for ``z`` in the modulation) and a trainable ``W0``
    exist only for ablations.
    """

    W0: T.Tensor
    z: T.Tensor
    alpha: float = 0.1
    activation: str = "tanh"
    out_scale: float = 1.0
    z_scale: float = 1.0
    seed: int = 0
    variant: str = "mapped"
    wmap: T.Tensor | None = None
    _row_norms: np.ndarray | None = field(default=None, repr=False)
    _row_mean: np.ndarray | None = field(default=None, repr=False)

    @property
    def P(self) -> int:
        return self.W0.shape[0]

    @property
    def d(self) -> int:
        return self.W0.shape[1]

    @property
    def b(self) -> np.ndarray:
        return np.zeros(self.P, dtype=np.float32)

    def row_norms_sq(self) -> np.ndarray:
        if self._row_norms is None or self.W0.requires_grad:
            w = self.W0.data
            self._row_norms = np.einsum("ij,ij->i", w, w, dtype=np.float64)
        return self._row_norms

    def row_mean(self) -> np.ndarray:
        if self._row_mean is None or self.W0.requires_grad:
            self._row_mean = self.W0.data.mean(axis=0, dtype=np.float64)
        return self._row_mean

    def trainable(self) -> dict[str, T.Tensor]:
        out = {}
        if self.z.requires_grad:
            out["z"] = self.z
        if self.W0.requires_grad:
            out["W0"] = self.W0
        if self.wmap is not None and self.wmap.requires_grad:
            out["wmap"] = self.wmap
        return out

    def assign(self, name: str, value: np.ndarray) -> None:
        old = getattr(self, name)
        setattr(self, name, T.Tensor._wrap(np.asarray(value, dtype=old.dtype), requires_grad=old.requires_grad))


def make_state(P: int, d: int, seed: int, alpha: float = 0.1, activation: str = "tanh",
               out_scale="auto", z_scale="auto", target_rms: float = 0.1, dtype=None,
               variant: str = "mapped", max_ratio: float | None = 0.1) -> MappingState:
    """Build a unit with a freshly initialised ``W0`` and latent.

    ``max_ratio`` enforces ``d <= max_ratio * P``; pass ``None`` to disable.
    """
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}", [("mapping.activation", f"one of {ACTIVATIONS}")])
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}", [("mapping.variant", f"one of {VARIANTS}")])
    if alpha < 0:
        raise ConfigError("modulation scale must be non-negative", [("mapping.alpha", "must be >= 0")])
    if max_ratio is not None and d > max_ratio * P:
        raise ConfigError(f"latent size d={d} violates d <= {max_ratio} * P (P={P})",
                          [("mapping.d", f"d must be <= {max_ratio} * P = {max_ratio * P:g}")])
    dtype = dtype or T.get_default_dtype()
    w0 = cached_orthogonal(P, d, seed)
    if z_scale == "auto":
        z_scale = 1.0 / math.sqrt(P * d)
    z_rng = np.random.default_rng([seed, 1])
    z0 = (z_rng.standard_normal(d) * z_scale).astype(dtype)
    if variant == "no_modulation":
        alpha = 0.0
    state = MappingState(
        W0=T.Tensor._wrap(w0, requires_grad=variant in ("full_dnn", "lv_full_dnn")),
        z=T.Tensor._wrap(z0, requires_grad=variant != "full_dnn"),
        alpha=float(alpha),
        activation=activation,
        out_scale=1.0,
        z_scale=float(z_scale),
        seed=int(seed),
        variant=variant,
    )
    if variant == "lv_wmap":
        m0 = (np.random.default_rng([seed, 2]).standard_normal(d) * z_scale).astype(dtype)
        state.wmap = T.Tensor._wrap(m0, requires_grad=True)
    if out_scale == "auto":
        theta = generate(state).data.astype(np.float64)
        rms = float(np.sqrt(np.mean(theta * theta)))
        state.out_scale = target_rms / rms if rms > 0 else 1.0
    else:
        state.out_scale = float(out_scale)
    return state


def modulate(W0, z, alpha: float) -> T.Tensor:
    """Materialised modulated weights ``W0[j, i] + alpha * z[i]`` (P x d).

    Used for small instances and tests; generation uses the equivalent
    closed form instead.
    """
    W0 = W0 if isinstance(W0, T.Tensor) else T.Tensor(W0)
    z = z if isinstance(z, T.Tensor) else T.Tensor(z)
    if z.ndim != 1 or z.shape[0] != W0.shape[1]:
        raise ContractError(f"latent length {z.shape} does not match {W0.shape[1]} mapping columns")
    if alpha == 0:
        return W0
    ones = T.Tensor(np.ones(W0.shape[0]), dtype=z.dtype)
    return T.add(W0, T.mul(T.outer(ones, z), alpha))


def _shift(state: MappingState, z: T.Tensor) -> T.Tensor | None:
    if state.alpha == 0:
        return None
    if state.wmap is not None:
        return T.mul(T.sum(T.mul(state.wmap, z)), state.alpha)
    return T.mul(T.sum(T.square(z)), state.alpha)


def activate(state: MappingState, a: T.Tensor) -> T.Tensor:
    out = T.tanh(a) if state.activation == "tanh" else a
    return T.mul(out, state.out_scale) if state.out_scale != 1.0 else out


def forward_parts(state: MappingState, zs: Sequence[T.Tensor]) -> list[tuple[T.Tensor, T.Tensor]]:
    """``(W0 @ z, pre-activation)`` for several latents, one pass over ``W0``."""
    for z in zs:
        if z.ndim != 1 or z.shape[0] != state.d:
            raise ContractError(f"latent length {z.shape} does not match d={state.d}")
    if len(zs) == 1:
        lin = [T.matmul(state.W0, zs[0])]
    else:
        stacked = T.concat([T.reshape(z, (state.d, 1)) for z in zs], axis=1)
        both = T.matmul(state.W0, stacked)
        lin = [both[:, k] for k in range(len(zs))]
    out = []
    for z, w in zip(zs, lin):
        shift = _shift(state, z)
        out.append((w, w if shift is None else T.add(w, shift)))
    return out


def preactivations(state: MappingState, zs: Sequence[T.Tensor]) -> list[T.Tensor]:
    return [a for _, a in forward_parts(state, zs)]


def generate(state: MappingState, z: T.Tensor | None = None) -> T.Tensor:
    """Generated parameter vector of length P."""
    a = preactivations(state, [state.z if z is None else z])[0]
    return activate(state, a)


def generate_many(state: MappingState, zs: Sequence[T.Tensor]) -> list[T.Tensor]:
    return [activate(state, a) for a in preactivations(state, zs)]


def activation_slope(state: MappingState, a: T.Tensor) -> T.Tensor | None:
    """``out_scale * act'(a)`` as a tensor (None means the constant out_scale)."""
    if state.activation == "linear":
        return None
    t = T.tanh(a)
    return T.mul(T.sub(1.0, T.square(t)), state.out_scale)


def partition(theta: T.Tensor, spec: ParameterSpec) -> list[T.Tensor]:
    """Slice a flat parameter vector into per-layer tensors."""
    if theta.ndim != 1 or theta.shape[0] != spec.flat_size:
        raise ContractError(f"generated vector has {theta.size} entries, expected P={spec.flat_size}")
    out = []
    for layer, off in zip(spec, spec.offsets):
        piece = theta[off:off + layer.size]
        out.append(T.reshape(piece, layer.shape))
    return out


def lwt_budget(sizes: Sequence[int], total: int, minimum: int = 8, max_ratio: float | None = 0.1) -> list[int]:
    """Split a latent budget over units proportionally to sqrt(unit size).

    Each share is clamped to ``[min(minimum, cap), cap]`` with
    ``cap = floor(max_ratio * size)``; the clamped remainder is spread over
    the other units and largest-remainder rounding makes the shares sum to
    ``total`` exactly.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    caps = np.floor(sizes * max_ratio) if max_ratio is not None else sizes.copy()
    caps = np.maximum(caps, 1)
    lows = np.minimum(minimum, caps)
    if total < lows.sum() or total > caps.sum():
        raise ConfigError(f"latent budget {total} infeasible for unit sizes {sizes.astype(int).tolist()}",
                          [("mapping.d", f"must lie in [{int(lows.sum())}, {int(caps.sum())}]")])
    weights = np.sqrt(sizes)
    share = np.zeros_like(sizes)
    fixed = np.zeros(len(sizes), dtype=bool)
    for _ in range(len(sizes) + 1):
        free = ~fixed
        rest = total - share[fixed].sum()
        share[free] = weights[free] / weights[free].sum() * rest
        over = free & (share > caps)
        under = free & (share < lows)
        if not over.any() and not under.any():
            break
        share[over] = caps[over]
        share[under] = lows[under]
        fixed |= over | under
    base = np.floor(share).astype(int)
    base = np.clip(base, lows.astype(int), caps.astype(int))
    short = total - base.sum()
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    i = 0
    while short != 0 and i < 4 * len(sizes):
        k = order[i % len(sizes)]
        step = 1 if short > 0 else -1
        if lows[k] <= base[k] + step <= caps[k]:
            base[k] += step
            short -= step
        i += 1
    return [int(v) for v in base]


@dataclass
class MappingUnit:
    state: MappingState
    spec: ParameterSpec


@dataclass
class MappingPlan:
    """How latent units tile a target's parameter spec."""

    arch: TargetArchitecture
    mode: str
    units: list[MappingUnit]

    @property
    def spec(self) -> ParameterSpec:
        return build_spec(self.arch)

    def check_tiling(self) -> None:
        names = [n for u in self.units for n in u.spec.names]
        full = self.spec.names
        if sorted(names) != sorted(full) or len(names) != len(set(names)):
            raise ContractError(f"units do not tile the parameter spec: {names} vs {full}")

    def trainable_count(self) -> int:
        return int(sum(t.size for u in self.units for t in u.state.trainable().values()))

    def latent_sizes(self) -> list[int]:
        return [u.state.d for u in self.units]

    def max_mapping_entries(self) -> int:
        return max(u.state.P * u.state.d for u in self.units)

    def named_trainables(self) -> dict[str, tuple[MappingState, str]]:
        out = {}
        for k, u in enumerate(self.units):
            for attr in u.state.trainable():
                out[f"unit{k}.{attr}"] = (u.state, attr)
        return out

    def w0_checksums(self) -> list[str]:
        return [checksum(u.state.W0.data) for u in self.units]

    def sample_noise(self, sigma: float, rng: np.random.Generator) -> list[np.ndarray]:
        """Latent perturbations ``eps ~ N(0, (sigma * z_scale)^2 I)`` per unit."""
        return [rng.standard_normal(u.state.d) * (sigma * u.state.z_scale) for u in self.units]


def build_plan(arch: TargetArchitecture, mode: str, d, seed: int, alpha: float = 0.1,
               activation: str = "tanh", out_scale="auto", z_scale="auto", target_rms: float = 0.1,
               variant: str = "mapped", max_ratio: float | None = 0.1, dtype=None) -> MappingPlan:
    """Create a single-latent (``"slvt"``) or layer-wise (``"lwt"``) plan.

    For layer-wise mode ``d`` is either a total budget (split with
    :func:`lwt_budget`) or an explicit list of per-unit sizes.
    """
    spec = build_spec(arch)
    if mode == "slvt":
        groups = [spec.names]
        sizes = [int(d)]
    elif mode == "lwt":
        groups = spec.groups()
        unit_sizes = [spec.subset(g).flat_size for g in groups]
        if isinstance(d, (list, tuple)):
            if len(d) != len(groups):
                raise ConfigError(f"need {len(groups)} per-layer latent sizes, got {len(d)}", [("mapping.d", "length mismatch")])
            sizes = [int(v) for v in d]
        else:
            sizes = lwt_budget(unit_sizes, int(d), max_ratio=max_ratio)
    else:
        raise ConfigError(f"unknown mapping mode {mode!r}", [("mapping.mode", "one of slvt, lwt")])
    units = []
    for k, (names, dk) in enumerate(zip(groups, sizes)):
        sub = spec.subset(names)
        unit_seed = seed if mode == "slvt" else int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        state = make_state(sub.flat_size, dk, unit_seed, alpha=alpha, activation=activation,
                           out_scale=out_scale, z_scale=z_scale, target_rms=target_rms,
                           variant=variant, max_ratio=max_ratio, dtype=dtype)
        units.append(MappingUnit(state, sub))
    plan = MappingPlan(arch, mode, units)
    plan.check_tiling()
    return plan


def generate_all(plan: MappingPlan, offsets: Sequence[np.ndarray] | None = None):
    """Per-layer parameter tensors in spec order.

    With ``offsets`` (one latent perturbation per unit) returns a pair
    ``(clean, perturbed)``; both are produced with one pass over each ``W0``.
    """
    spec = plan.spec
    clean: dict[str, T.Tensor] = {}
    shifted: dict[str, T.Tensor] = {}
    for k, unit in enumerate(plan.units):
        st = unit.state
        if offsets is None:
            thetas = [generate(st)]
        else:
            eps = T.Tensor._wrap(np.asarray(offsets[k], dtype=st.z.dtype))
            thetas = generate_many(st, [st.z, T.add(st.z, eps)])
        clean.update(zip(unit.spec.names, partition(thetas[0], unit.spec)))
        if offsets is not None:
            shifted.update(zip(unit.spec.names, partition(thetas[1], unit.spec)))
    first = [clean[n] for n in spec.names]
    if offsets is None:
        return first
    return first, [shifted[n] for n in spec.names]


def reduction_ratio(arch: TargetArchitecture, trainable: int) -> float:
    return build_spec(arch).flat_size / trainable
