"""Per-layer parameter snapshots and their principal components.

:class:`SnapshotLog` is used as a training hook: it copies every layer's
flattened parameters at step 0 and every ``k`` steps after that, so a run of
``n`` steps yields ``n // k + 1`` snapshots.  :func:`pca` projects each
layer's snapshot trajectory onto its leading principal directions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import UsageError

GRAM_LIMIT = 512


class SnapshotLog:
    """Memory-bounded record of per-layer parameter snapshots."""

    def __init__(self, names, every: int = 50, cap_mb: float = 512.0):
        if every < 1:
            raise ConfigError("snapshot interval must be >= 1", [("probe.every", "must be >= 1")])
        self.names = list(names)
        self.every = int(every)
        self.cap_bytes = int(cap_mb * 2 ** 20)
        self.steps: list[int] = []
        self.rows: dict[str, list[np.ndarray]] = {n: [] for n in self.names}
        self.nbytes = 0

    def __len__(self) -> int:
        return len(self.steps)

    def record(self, step: int, params) -> None:
        params = [np.asarray(p) for p in params]
        if len(params) != len(self.names):
            raise ValueError(f"expected {len(self.names)} layers, got {len(params)}")
        add = sum(p.size * 8 for p in params)
        if self.nbytes + add > self.cap_bytes:
            raise ConfigError(
                f"snapshot log would exceed its {self.cap_bytes / 2 ** 20:.0f} MB cap at step {step}; "
                f"use a larger interval than {self.every}",
                [("probe.every", "increase the snapshot interval"), ("probe.cap_mb", "or raise the cap")])
        for n, p in zip(self.names, params):
            self.rows[n].append(p.astype(np.float64).ravel().copy())
        self.steps.append(int(step))
        self.nbytes += add

    def hook(self, step: int, model) -> None:
        """Trainer hook: record when ``step`` is a multiple of the interval."""
        if step % self.every == 0:
            self.record(step, model.inference_params())

    def matrix(self, name: str) -> np.ndarray:
        return np.stack(self.rows[name])

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"probe.{n}": self.matrix(n) for n in self.names if self.rows[n]}
        out["probe.steps"] = np.asarray(self.steps, dtype=np.int64)
        return out


@dataclass
class PCAResult:
    projections: np.ndarray  # T x k
    ratios: np.ndarray  # k
    components: np.ndarray  # k x n
    mean: np.ndarray  # n
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _fix_signs(proj: np.ndarray, comps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude loading of each component made positive
    idx = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(len(comps)), idx])
    signs[signs == 0] = 1.0
    return proj * signs, comps * signs[:, None]


def pca_matrix(X, components: int = 2, method: str = "auto") -> PCAResult:
    """PCA of the rows of ``X`` (``T`` snapshots by ``n`` parameters).

    ``method="gram"`` eigendecomposes the ``T x T`` Gram matrix (default when
    ``T <= 512``); ``"svd"`` runs a thin SVD of the centred matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise UsageError(f"PCA needs at least 2 snapshots, got shape {X.shape}")
    t, n = X.shape
    if not 1 <= components <= min(t, n):
        raise ValueError(f"components must lie in [1, min(T, n)] = [1, {min(t, n)}], got {components}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if method == "auto":
        method = "gram" if t <= GRAM_LIMIT else "svd"
    if method == "gram":
        evals, evecs = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        sv = np.sqrt(evals)
        total = evals.sum()
        k = components
        proj = evecs[:, :k] * sv[:k]
        safe = np.where(sv[:k] > 0, sv[:k], 1.0)
        comps = (Xc.T @ evecs[:, :k] / safe).T
        var = evals[:k]
    elif method == "svd":
        u, sv, vt = np.linalg.svd(Xc, full_matrices=False)
        k = components
        proj = u[:, :k] * sv[:k]
        comps = vt[:k]
        var = sv[:k] ** 2
        total = float((sv ** 2).sum())
    else:
        raise ValueError(f"unknown PCA method {method!r}")
    ratios = var / total if total > 0 else np.zeros(k)
    proj, comps = _fix_signs(proj, comps)
    return PCAResult(proj, ratios, comps, mean, sv[:k])


def pca(log: SnapshotLog, components: int = 2, method: str = "auto") -> dict[str, PCAResult]:
    """Per-layer PCA of a snapshot log."""
    if len(log) < 2:
        raise UsageError(f"PCA needs at least 2 snapshots, log has {len(log)}")
    out = {}
    for name in log.names:
        X = log.matrix(name)
        out[name] = pca_matrix(X, min(components, X.shape[0], X.shape[1]), method)
    return out


def report(analysis: dict[str, PCAResult], steps, out_dir) -> dict[str, str]:
    """One CSV per layer (``step, pc1, pc2, ...``) plus ``summary.csv``.

    Returns the written paths keyed by layer name (and ``"summary"``).
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    width = max(len(r.ratios) for r in analysis.values())
    for name, res in analysis.items():
        path = os.path.join(out_dir, f"pca_{name}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"pc{i + 1}" for i in range(res.projections.shape[1])])
            for s, row in zip(steps, res.projections):
                w.writerow([int(s)] + [repr(float(v)) for v in row])
        paths[name] = path
    summary = os.path.join(out_dir, "summary.csv")
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "size"] + [f"pc{i + 1}_ratio" for i in range(width)] + ["total"])
        for name, res in analysis.items():
            ratios = [repr(float(r)) for r in res.ratios] + [""] * (width - len(res.ratios))
            w.writerow([name, res.mean.size] + ratios + [repr(float(res.ratios.sum()))])
    paths["summary"] = summary
    return paths
