"""Task loss plus the three generator regularisers.

The combined objective is::

    L = L_task + sum_k [ exp(-s_k) * L_k + s_k ]      k in {stab, smooth, align}

with trainable log-weights ``s_k``.  The ``+ s_k`` term keeps the effective
coefficients ``exp(-s_k)`` from collapsing to zero; at ``s_k = 0`` the
objective is the plain sum of the terms.

Smoothness is the squared Frobenius norm of the Jacobian of the whole
generator ``z -> theta``.  Because the pre-activation is quadratic in ``z``
its Jacobian has the closed form ``J[j, i] = c * act'(a_j) * (W0[j, i] +
2 alpha z_i)`` and the exact squared norm costs one pass over the row norms
of ``W0``.  The Hutchinson estimator (``probes >= 1``) is kept for
cross-checking and for generators without that structure.

All regularisers are measured in latent units: Jacobians are taken with
respect to ``z / z_scale`` so the values do not depend on how small the
latent was initialised.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, NumericalAbort
from .mapping import (
    MappingPlan,
    MappingState,
    activate,
    activation_slope,
    forward_parts,
    generate_all,
    modulate,
    partition,
)
from .zoo import forward as target_forward

TERMS = ("stab", "smooth", "align")
_EPS_NORM = 1e-12


class AlignmentWarning(UserWarning):
    """Alignment fell back to its neutral value because a vector was zero."""


def _zero(dtype=None) -> T.Tensor:
    return T.Tensor(0.0, dtype=dtype)


# -- task -------------------------------------------------------------------

def task_loss(logits: T.Tensor, labels) -> T.Tensor:
    """Mean cross-entropy; labels must be integers in ``[0, C)``."""
    y = np.asarray(labels.data if isinstance(labels, T.Tensor) else labels)
    c = logits.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= c or not np.all(np.equal(np.mod(y, 1), 0))):
        bad = y[(y < 0) | (y >= c)]
        raise DataError(f"labels must be integers in [0, {c}); found {bad[:5].tolist() or 'non-integer values'}")
    return T.cross_entropy(logits, y)


def task_loss_mse(pred: T.Tensor, target) -> T.Tensor:
    target = target if isinstance(target, T.Tensor) else T.Tensor(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        target = T.reshape(target, pred.shape)
    return T.mean(T.square(T.sub(pred, target)))


# -- stability --------------------------------------------------------------

def stability_from_outputs(clean: T.Tensor, noisy: T.Tensor) -> T.Tensor:
    """Batch mean of the squared output change ``|f(z + eps) - f(z)|^2``."""
    return T.div(T.sum(T.square(T.sub(noisy, clean))), clean.shape[0])


def stability_loss(plan: MappingPlan, x, sigma: float, seed: int | None = None,
                   rng: np.random.Generator | None = None) -> T.Tensor:
    """One-sample estimate of the output sensitivity to latent noise."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return _zero(plan.units[0].state.z.dtype)
    rng = rng if rng is not None else np.random.default_rng(seed)
    clean, noisy = generate_all(plan, plan.sample_noise(sigma, rng))
    return stability_from_outputs(target_forward(plan.arch, clean, x), target_forward(plan.arch, noisy, x))


# -- smoothness -------------------------------------------------------------

def _mod_vector(state: MappingState, z: T.Tensor) -> T.Tensor:
    # d(pre-activation)/dz = W0 + alpha * 1 m^T with m = 2z (or the wmap vector)
    return state.wmap if state.wmap is not None else T.mul(z, 2.0)


def _row_norms(state: MappingState):
    if state.W0.requires_grad:
        return T.sum(T.square(state.W0), axis=1)
    return T.Tensor._wrap(state.row_norms_sq().astype(state.z.dtype))


def unit_smoothness(state: MappingState, lin: T.Tensor | None = None, a: T.Tensor | None = None,
                    probes: int = 0, rng: np.random.Generator | None = None) -> T.Tensor:
    """Squared Jacobian norm of one unit's generator at its current latent.

    ``probes == 0`` gives the exact value; ``probes >= 1`` the Hutchinson
    mean of ``|J^T v|^2`` over Gaussian probes ``v``.
    """
    z = state.z
    if lin is None or a is None:
        lin, a = forward_parts(state, [z])[0]
    slope = activation_slope(state, a)
    scale2 = state.z_scale ** 2
    m = _mod_vector(state, z) if state.alpha else None
    if probes == 0:
        base = _row_norms(state)
        if m is not None:
            w0m = T.mul(lin, 2.0) if state.wmap is None else T.matmul(state.W0, m)
            base = T.add(T.add(base, T.mul(w0m, 2.0 * state.alpha)),
                         T.mul(T.sum(T.square(m)), state.alpha ** 2))
        if slope is None:
            val = T.mul(T.sum(base), state.out_scale ** 2)
        else:
            val = T.sum(T.mul(T.square(slope), base))
        return T.mul(val, scale2)
    if probes < 0:
        raise ValueError("probes must be >= 0")
    rng = rng if rng is not None else np.random.default_rng()
    total = None
    for _ in range(probes):
        v = T.Tensor._wrap(rng.standard_normal(state.P).astype(z.dtype))
        g = T.mul(v, state.out_scale) if slope is None else T.mul(slope, v)
        jtv = T.reshape(T.matmul(T.reshape(g, (1, state.P)), state.W0), (state.d,))
        if m is not None:
            jtv = T.add(jtv, T.mul(m, T.mul(T.sum(g), state.alpha)))
        sq = T.sum(T.square(jtv))
        total = sq if total is None else T.add(total, sq)
    return T.mul(total, scale2 / probes)


def smoothness_loss(plan: MappingPlan, probes: int = 0, seed: int | None = None,
                    rng: np.random.Generator | None = None) -> T.Tensor:
    """Squared Jacobian norm of the full generator (sum over units)."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    parts = [unit_smoothness(u.state, probes=probes, rng=rng) for u in plan.units]
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return out


def exact_jacobian(state: MappingState) -> np.ndarray:
    """Dense ``P x d`` Jacobian (latent units); for tests on small instances."""
    z = state.z.data.astype(np.float64)
    w0 = state.W0.data.astype(np.float64)
    m = (state.wmap.data if state.wmap is not None else 2.0 * z) if state.alpha else np.zeros_like(z)
    shift = state.alpha * (state.wmap.data @ z if state.wmap is not None else z @ z)
    a = w0 @ z + shift
    slope = state.out_scale * (1.0 - np.tanh(a) ** 2 if state.activation == "tanh" else np.ones_like(a))
    return slope[:, None] * (w0 + state.alpha * m[None, :]) * state.z_scale


# -- alignment --------------------------------------------------------------

def _neutral(like: T.Tensor, why: str) -> T.Tensor:
    warnings.warn(f"alignment loss neutralised: {why}", AlignmentWarning, stacklevel=3)
    return T.Tensor(1.0, dtype=like.dtype)


def alignment_loss(z: T.Tensor, W_mod: T.Tensor) -> T.Tensor:
    """``1 - cos(z, mean over rows of W_mod)``.

    Returns the neutral value 1 (no gradient) with an
    :class:`AlignmentWarning` when either vector is numerically zero.
    """
    if W_mod.ndim != 2 or W_mod.shape[1] != z.shape[0]:
        raise T.DimensionError(f"alignment: W_mod {W_mod.shape} incompatible with z {z.shape}")
    wbar = T.mean(W_mod, axis=0)
    return _align(z, wbar)


def _align(z: T.Tensor, wbar: T.Tensor) -> T.Tensor:
    if float(np.linalg.norm(z.data)) < _EPS_NORM:
        return _neutral(z, "zero latent")
    if float(np.linalg.norm(wbar.data)) < _EPS_NORM:
        return _neutral(z, "zero row mean")
    return T.sub(1.0, T.cosine_similarity(z, wbar))


def unit_alignment(state: MappingState) -> T.Tensor:
    """Alignment for one unit without materialising the modulated matrix.

    The row mean of ``W0 + alpha 1 m^T`` is ``rowmean(W0) + alpha m``.
    """
    z = state.z
    m = state.wmap if state.wmap is not None else z
    if state.W0.requires_grad:
        m0 = T.mean(state.W0, axis=0)
    else:
        m0 = T.Tensor._wrap(state.row_mean().astype(z.dtype))
    wbar = T.add(m0, T.mul(m, state.alpha)) if state.alpha else m0
    return _align(z, wbar)


def alignment_literal(state: MappingState) -> T.Tensor:
    """Same value as :func:`unit_alignment` via the explicit ``P x d`` matrix."""
    m = state.wmap if state.wmap is not None else state.z
    return alignment_loss(state.z, modulate(state.W0, m, state.alpha))


def plan_alignment(plan: MappingPlan) -> T.Tensor:
    """Alignment averaged over units."""
    parts = [unit_alignment(u.state) for u in plan.units]
    out = parts[0]
    for p in parts[1:]:
        out = T.add(out, p)
    return T.div(out, len(parts)) if len(parts) > 1 else out


# -- combination ------------------------------------------------------------

@dataclass
class LossBundle:
    """Trainable log-weights and per-term settings.

    ``mask`` lists the enabled regularisers; disabled terms are neither
    computed nor trained.  With ``per_unit`` every layer unit gets its own
    log-weights (layer-wise plans only).  ``max_lambda`` caps every
    effective weight by flooring its log-weight on assignment (``None``
    leaves them free).
    """

    mask: tuple[str, ...] = TERMS
    sigma: float = 1e-2
    probes: int = 0
    per_unit: bool = False
    n_units: int = 1
    s_init: float = 0.0
    max_lambda: float | None = 1.0
    s: dict[str, T.Tensor] = field(default_factory=dict)
    task: str = "classification"

    def __post_init__(self):
        unknown = set(self.mask) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}; valid: {TERMS}")
        self.mask = tuple(t for t in TERMS if t in self.mask)
        if not self.s:
            for key in self.keys():
                self.s[key] = T.Tensor(self.s_init, requires_grad=True)

    def keys(self) -> list[str]:
        if not (self.per_unit and self.n_units > 1):
            return list(self.mask)
        # stability acts on the network output, so it keeps one shared weight
        return [t if t == "stab" else f"{t}.{k}" for t in self.mask
                for k in (range(1) if t == "stab" else range(self.n_units))]

    def lambdas(self) -> dict[str, float]:
        return {k: float(math.exp(-float(v.data))) for k, v in self.s.items()}

    def assign(self, key: str, value) -> None:
        old = self.s[key]
        value = np.asarray(value).reshape(old.shape)
        if self.max_lambda is not None:
            value = np.maximum(value, -math.log(self.max_lambda))
        self.s[key] = T.Tensor(value, dtype=old.dtype, requires_grad=True)

    def trainable(self) -> dict[str, T.Tensor]:
        return {f"s.{k}": v for k, v in self.s.items()}


def total_loss(bundle: LossBundle, terms: dict) -> T.Tensor:
    """Combine ``terms`` (``task`` plus enabled regularisers).

    Regulariser entries may be scalars or, for per-unit weights, lists with
    one scalar per unit.  Raises :class:`NumericalAbort` if any term or the
    total is not finite.
    """
    bad = {}
    for name, val in terms.items():
        vals = val if isinstance(val, (list, tuple)) else [val]
        for v in vals:
            if not np.all(np.isfinite(v.data)):
                bad[name] = float(np.asarray(v.data).ravel()[0])
    if bad:
        raise NumericalAbort(f"non-finite loss terms: {sorted(bad)}", dump={"terms": bad, "s": _s_dump(bundle)})
    total = terms["task"]
    for name in bundle.mask:
        val = terms[name]
        if isinstance(val, (list, tuple)) and bundle.per_unit and bundle.n_units > 1:
            pairs = [(v, bundle.s[f"{name}.{k}"]) for k, v in enumerate(val)]
        else:
            if isinstance(val, (list, tuple)):
                val = _sum(val) if name == "smooth" else T.div(_sum(val), len(val))
            pairs = [(val, bundle.s[name])]
        for v, s in pairs:
            total = T.add(total, T.add(T.mul(T.exp(T.neg(s)), v), s))
    if not np.isfinite(total.data).all():
        raise NumericalAbort("non-finite total loss", dump={"s": _s_dump(bundle)})
    return total


def _sum(vals):
    out = vals[0]
    for v in vals[1:]:
        out = T.add(out, v)
    return out


def _s_dump(bundle: LossBundle) -> dict:
    return {k: float(v.data) for k, v in bundle.s.items()}


# -- fused objective --------------------------------------------------------

def plan_assembler(plan: MappingPlan):
    """Map per-unit generated vectors to the target's layer list."""
    names = plan.spec.names

    def assemble(thetas):
        named = {}
        for unit, theta in zip(plan.units, thetas):
            named.update(zip(unit.spec.names, partition(theta, unit.spec)))
        return [named[n] for n in names]

    return assemble


def objective(states, assemble, bundle: LossBundle, x, y, rng: np.random.Generator,
              forward) -> tuple[T.Tensor, dict[str, float], T.Tensor]:
    """Full objective for one minibatch.

    ``states`` are the generator units and ``assemble`` turns their
    generated vectors into the parameter list ``forward(params, x)``
    expects.  Clean and perturbed vectors (when stability is enabled) share
    one pass over each ``W0``; the clean pre-activations are reused by the
    smoothness term.  Returns ``(total, term values, clean outputs)``.
    """
    noisy_needed = "stab" in bundle.mask and bundle.sigma > 0
    clean, noisy = [], []
    smooth_parts, align_parts = [], []
    for st in states:
        zs = [st.z]
        if noisy_needed:
            eps = rng.standard_normal(st.d) * (bundle.sigma * st.z_scale)
            zs.append(T.add(st.z, T.Tensor._wrap(eps.astype(st.z.dtype))))
        parts = forward_parts(st, zs)
        clean.append(activate(st, parts[0][1]))
        if noisy_needed:
            noisy.append(activate(st, parts[1][1]))
        if "smooth" in bundle.mask:
            lin, a = parts[0]
            smooth_parts.append(unit_smoothness(st, lin, a, probes=bundle.probes, rng=rng))
        if "align" in bundle.mask:
            align_parts.append(unit_alignment(st))
    out = forward(assemble(clean), x)
    terms: dict = {"task": task_loss(out, y) if bundle.task == "classification" else task_loss_mse(out, y)}
    if "stab" in bundle.mask:
        if noisy_needed:
            terms["stab"] = stability_from_outputs(out, forward(assemble(noisy), x))
        else:
            terms["stab"] = _zero(out.dtype)
    if "smooth" in bundle.mask:
        terms["smooth"] = smooth_parts
    if "align" in bundle.mask:
        terms["align"] = align_parts
    total = total_loss(bundle, terms)
    values = {}
    for name, val in terms.items():
        if isinstance(val, list):
            vals = [float(v.data) for v in val]
            values[name] = float(np.sum(vals) if name == "smooth" else np.mean(vals))
        else:
            values[name] = float(val.data)
    return total, values, out
