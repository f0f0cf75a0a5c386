"""Training loop, evaluation, checkpoints and metrics.

Every run is driven by a resolved config dict (see :mod:`mapnet.config`).
Randomness is derived from seeds and counters only: the minibatch order of
epoch ``e`` comes from ``(seeds.data, e)`` and the stability noise of step
``t`` from ``(seeds.noise, t)``.  A checkpoint therefore only needs the
trainable values, optimiser moments and the step counter to resume exactly.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import resource
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .config import dumps, validate_config
from .data import Dataset, batches, load_csv_series, load_idx_dir, synth
from .errors import ConfigError, ContractError, DataError, FormatError, NumericalAbort
from .losses import LossBundle, objective, plan_assembler, task_loss, task_loss_mse
from .mapping import MappingPlan, build_plan, checksum, generate_all
from .zoo import TargetArchitecture, build_spec, forward as target_forward, init_params

log = logging.getLogger("mapnet")

CHECKPOINT_MAGIC = b"MNCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

class Optimizer:
    """Per-name first-order optimiser working in rescaled coordinates.

    A parameter registered with scale ``c`` is optimised as ``u = p / c``:
    the gradient is multiplied by ``c`` and the update by ``c`` again.
    Latent vectors use ``c = z_scale`` so learning rates and clipping
    thresholds are expressed in latent units.
    """

    def __init__(self, kind="adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8, momentum=0.9,
                 weight_decay=0.0, **_):
        self.kind = kind
        self.lr = float(lr)
        self.betas = tuple(float(b) for b in betas)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.t = 0

    def step(self, updates: dict[str, tuple[np.ndarray, np.ndarray, float]], lr=None) -> dict[str, np.ndarray]:
        """``updates`` maps name -> (value, scaled gradient, scale); returns new values."""
        lr = self.lr if lr is None else lr
        self.t += 1
        out = {}
        for name, (value, g, scale) in updates.items():
            u = value.astype(np.float64) / scale
            g = g.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * u
            st = self.state.setdefault(name, {})
            if self.kind == "adam":
                b1, b2 = self.betas
                m = st.get("m", np.zeros_like(u)) * b1 + (1 - b1) * g
                v = st.get("v", np.zeros_like(u)) * b2 + (1 - b2) * g * g
                st["m"], st["v"] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                u = u - lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                buf = st.get("m", np.zeros_like(u)) * self.momentum + g
                st["m"] = buf
                u = u - lr * buf
            out[name] = (u * scale).astype(value.dtype)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"opt.{name}.{k}": v for name, st in self.state.items() for k, v in st.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        self.state = {}
        for key, arr in arrays.items():
            if key.startswith("opt."):
                name, slot = key[4:].rsplit(".", 1)
                self.state.setdefault(name, {})[slot] = np.array(arr, dtype=np.float64)


def lr_at(cfg: dict, step: int, total: int) -> float:
    lr = cfg["optim"]["lr"]
    if cfg["optim"]["schedule"] == "cosine" and total > 0:
        return 0.5 * lr * (1 + math.cos(math.pi * min(step, total) / total))
    return lr


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class Model:
    """Common interface for mapped, baseline and fine-tuned networks."""

    arch: TargetArchitecture
    task: str

    def trainables(self) -> dict[str, tuple[T.Tensor, float]]:
        raise NotImplementedError

    def assign(self, name: str, value: np.ndarray) -> None:
        raise NotImplementedError

    def objective(self, x, y, rng) -> tuple[T.Tensor, dict, T.Tensor]:
        raise NotImplementedError

    def inference_params(self) -> list[np.ndarray]:
        raise NotImplementedError

    def forward(self, params, x):
        return target_forward(self.arch, params, x)

    def clip_group(self) -> set[str]:
        return set()

    def lambdas(self) -> dict[str, float]:
        return {}

    def fixed_checksums(self) -> list[str]:
        return []

    def trainable_count(self) -> int:
        return int(sum(t.size for t, _ in self.trainables().values()))


class MappedModel(Model):
    def __init__(self, plan: MappingPlan, bundle: LossBundle, task: str = "classification"):
        self.plan = plan
        self.bundle = bundle
        self.arch = plan.arch
        self.spec = plan.spec
        self.task = task
        bundle.task = task
        self._assemble = plan_assembler(plan)

    def trainables(self):
        out = {}
        for name, (state, attr) in self.plan.named_trainables().items():
            scale = state.z_scale if attr in ("z", "wmap") else 1.0
            out[name] = (getattr(state, attr), scale)
        for name, s in self.bundle.trainable().items():
            out[name] = (s, 1.0)
        return out

    def assign(self, name, value):
        if name.startswith("s."):
            self.bundle.assign(name[2:], value)
            return
        unit, attr = name.split(".", 1)
        self.plan.units[int(unit[4:])].state.assign(attr, value)

    def objective(self, x, y, rng):
        states = [u.state for u in self.plan.units]
        return objective(states, self._assemble, self.bundle, x, y, rng, self.forward)

    def inference_params(self):
        return [p.data for p in generate_all(self.plan)]

    def clip_group(self):
        return {n for n in self.trainables() if n.endswith(".z") or n.endswith(".wmap")}

    def lambdas(self):
        return self.bundle.lambdas()

    def fixed_checksums(self):
        return [checksum(u.state.W0.data) for u in self.plan.units if not u.state.W0.requires_grad]


class BaselineModel(Model):
    """Target parameters trained directly (task loss only)."""

    def __init__(self, arch: TargetArchitecture, params: list[np.ndarray], task: str = "classification"):
        self.arch = arch
        self.task = task
        self.spec = build_spec(arch)
        self.params = [T.Tensor._wrap(np.array(p), requires_grad=True) for p in params]

    def trainables(self):
        return {f"param.{n}": (p, 1.0) for n, p in zip(self.spec.names, self.params)}

    def assign(self, name, value):
        i = self.spec.index(name[len("param."):])
        self.params[i] = T.Tensor._wrap(np.asarray(value, dtype=self.params[i].dtype), requires_grad=True)

    def objective(self, x, y, rng):
        out = self.forward(self.params, x)
        loss = task_loss(out, y) if self.task == "classification" else task_loss_mse(out, y)
        if not np.isfinite(loss.data):
            raise NumericalAbort("non-finite task loss", dump={"task": float(loss.data)})
        return loss, {"task": float(loss.data)}, out

    def inference_params(self):
        return [p.data for p in self.params]


def _dtype(cfg):
    return np.float64 if cfg["precision"] == "f64" else np.float32


def build_model(cfg: dict, task: str = "classification") -> Model:
    """Construct the model a resolved config describes (fresh initial state)."""
    arch = TargetArchitecture.from_dict(cfg["arch"])
    dtype = _dtype(cfg)
    if cfg["mode"] == "baseline":
        params = init_params(arch, np.random.default_rng(cfg["seeds"]["init"]), dtype=dtype)
        return BaselineModel(arch, params, task)
    m = cfg["mapping"]
    mode = "lwt" if cfg["mode"] == "lwt" else "slvt"
    plan = build_plan(arch, mode, m["d"], cfg["seeds"]["init"], alpha=m["alpha"], activation=m["activation"],
                      out_scale=m["out_scale"], z_scale=m["z_scale"], target_rms=m["target_rms"],
                      variant=m["variant"], max_ratio=m["max_ratio"], dtype=dtype)
    lo = cfg["loss"]
    bundle = LossBundle(mask=tuple(lo["mask"]), sigma=lo["sigma"], probes=lo["probes"], per_unit=lo["per_unit"],
                        n_units=len(plan.units), s_init=lo["s_init"], max_lambda=lo["max_lambda"], task=task)
    return MappedModel(plan, bundle, task)


def count_trainables(cfg: dict) -> int:
    """Trainable scalar count a resolved config implies, without building ``W0``.

    Agrees with ``build_model(cfg).trainable_count()``; useful for targets
    whose mapping matrix would not fit in memory.
    """
    arch = TargetArchitecture.from_dict(cfg["arch"])
    spec = build_spec(arch)
    if cfg["mode"] == "baseline":
        return spec.flat_size
    m = cfg["mapping"]
    if cfg["mode"] == "lwt":
        groups = spec.groups()
        sizes = [spec.subset(g).flat_size for g in groups]
        from .mapping import lwt_budget
        ds = [int(v) for v in m["d"]] if isinstance(m["d"], list) else lwt_budget(sizes, int(m["d"]), max_ratio=m["max_ratio"])
    else:
        sizes, ds = [spec.flat_size], [int(m["d"])]
    per_unit = {"mapped": lambda P, d: d, "no_modulation": lambda P, d: d, "lv_wmap": lambda P, d: 2 * d,
                "full_dnn": lambda P, d: P * d, "lv_full_dnn": lambda P, d: P * d + d}[m["variant"]]
    n = sum(per_unit(P, d) for P, d in zip(sizes, ds))
    lo = cfg["loss"]
    bundle = LossBundle(mask=tuple(lo["mask"]), per_unit=lo["per_unit"], n_units=len(ds))
    return n + len(bundle.keys())


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def load_dataset(cfg: dict) -> Dataset:
    """Dataset described by ``cfg["data"]`` (subsets and class filters applied)."""
    da = cfg["data"]
    if da["source"] == "idx":
        if not os.path.isdir(da["path"]):
            raise DataError(f"data directory not found: {da['path']} (expected train-images-idx3-ubyte, "
                            "train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte)")
        ds = load_idx_dir(da["path"])
    elif da["source"] == "csv":
        c = da["csv"]
        if not c["target"]:
            raise ConfigError("csv data needs data.csv.target", [("data.csv.target", "required")])
        ds = load_csv_series(da["path"], c["features"], c["target"], c["window"], c["horizon"], c["train_frac"])
    else:
        ds = synth(da["synth"]["kind"], da["synth"]["params"], seed=cfg["seeds"]["data"])
    if da["classes"]:
        ds = ds.filter_classes(da["classes"])
    if da["train_subset"]:
        ds = ds.subset("train", da["train_subset"], seed=cfg["seeds"]["data"])
    if da["test_subset"] and "test" in ds:
        ds = ds.subset("test", da["test_subset"], seed=cfg["seeds"]["data"])
    if cfg["precision"] == "f64":
        ds = Dataset({k: (x.astype(np.float64), y.astype(np.float64) if ds.task == "regression" else y)
                      for k, (x, y) in ds.splits.items()}, ds.task, ds.meta, ds.normalized)
    return ds


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def prune_mask(params: Iterable[np.ndarray], fraction: float) -> list[np.ndarray]:
    """Zero the ``ceil(fraction * n)`` smallest-magnitude entries (global, unstructured)."""
    params = [np.asarray(p) for p in params]
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0:
        return [p.copy() for p in params]
    flat = np.concatenate([p.ravel() for p in params])
    k = int(math.ceil(fraction * flat.size))
    order = np.argsort(np.abs(flat), kind="stable")
    flat = flat.copy()
    flat[order[:k]] = 0
    out, off = [], 0
    for p in params:
        out.append(flat[off:off + p.size].reshape(p.shape).astype(p.dtype))
        off += p.size
    return out


def evaluate_params(arch: TargetArchitecture, params, dataset: Dataset, split: str, task: str = "classification",
                    batch_size: int = 1000, forward=None) -> dict:
    """Accuracy (percent) and loss, or MSE, of fixed parameters on one split."""
    x, y = dataset.split(split)
    forward = forward or (lambda p, inp: target_forward(arch, p, inp))
    tensors = [T.Tensor._wrap(np.asarray(p)) for p in params]
    correct, loss_sum, n = 0, 0.0, len(x)
    for lo in range(0, n, batch_size):
        xb, yb = x[lo:lo + batch_size], y[lo:lo + batch_size]
        out = forward(tensors, T.Tensor._wrap(xb)).data
        if task == "classification":
            correct += int((out.argmax(axis=1) == yb).sum())
            z = out.astype(np.float64)
            z = z - z.max(axis=1, keepdims=True)
            lse = np.log(np.exp(z).sum(axis=1))
            loss_sum += float((lse - z[np.arange(len(yb)), yb]).sum())
        else:
            loss_sum += float(((out.astype(np.float64) - yb.reshape(out.shape)) ** 2).sum() / out.shape[1])
    if task == "classification":
        return {"accuracy": 100.0 * correct / n, "loss": loss_sum / n, "n": n}
    return {"mse": loss_sum / n, "n": n}


def evaluate(model: Model, dataset: Dataset, split: str = "test", prune: float = 0.0, batch_size: int = 1000) -> dict:
    """Deterministic metrics of a model on a split (no RNG consumed)."""
    params = model.inference_params()
    if prune:
        params = prune_mask(params, prune)
    return evaluate_params(model.arch, params, dataset, split, model.task, batch_size, forward=model.forward)


def overfit_gap(train_metrics: dict, test_metrics: dict) -> float:
    """Train minus test accuracy, in percentage points."""
    return float(train_metrics["accuracy"] - test_metrics["accuracy"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_str(s: str, width: str = "I") -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<" + width, len(b)) + b


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write the binary checkpoint format (see docs/formats.md)."""
    sections = [("config", 0, json.dumps(config, sort_keys=True).encode("utf-8")),
                ("meta", 0, json.dumps(meta, sort_keys=True).encode("utf-8"))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")
        le = arr.astype(arr.dtype.newbyteorder("<"))
        head = _pack_str(le.dtype.str, "B") + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        sections.append((name, 1, head + le.tobytes()))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(sections)))
        for name, kind, payload in sections:
            fh.write(_pack_str(name, "H") + struct.pack("<BQ", kind, len(payload)) + payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Inverse of :func:`save_checkpoint`: ``(config, arrays, meta)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        config, meta, arrays = None, None, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            kind, size = struct.unpack_from("<BQ", raw, pos)
            pos += 9
            payload = raw[pos:pos + size]
            if len(payload) != size:
                raise FormatError(f"{path}: truncated section {name!r}")
            pos += size
            if kind == 0:
                obj = json.loads(payload.decode("utf-8"))
                if name == "config":
                    config = obj
                elif name == "meta":
                    meta = obj
                continue
            dlen = payload[0]
            dt = np.dtype(payload[1:1 + dlen].decode("ascii"))
            ndim = payload[1 + dlen]
            shape = struct.unpack_from(f"<{ndim}Q", payload, 2 + dlen)
            body = payload[2 + dlen + 8 * ndim:]
            arrays[name] = np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if config is None or meta is None:
        raise FormatError(f"{path}: checkpoint lacks config or meta section")
    return config, arrays, meta


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    return {name: t.data for name, (t, _) in model.trainables().items()}


def restore_model(cfg: dict, arrays: dict[str, np.ndarray], task: str | None = None) -> Model:
    """Rebuild a model from config (regenerating ``W0``) and load trainable values."""
    task = task or cfg.get("_task", "classification")
    model = build_model(cfg, task)
    names = model.trainables()
    for name in names:
        if name not in arrays:
            raise FormatError(f"checkpoint lacks array {name!r}")
        model.assign(name, arrays[name])
    return model


def load_model(path) -> tuple[Model, dict, dict]:
    cfg, arrays, meta = load_checkpoint(path)
    if cfg.get("_kind") == "finetune":
        from .finetune import restore_finetune
        return restore_finetune(cfg, arrays), cfg, meta
    return restore_model(cfg, arrays, meta.get("task")), cfg, meta


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def peak_memory_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


@dataclass
class TrainResult:
    model: Model
    config: dict
    metrics: list[dict]
    step: int
    epoch: int
    optimizer: Optimizer
    meta: dict = field(default_factory=dict)

    def final(self, split="test") -> dict:
        for rec in reversed(self.metrics):
            if split in rec:
                return rec[split]
        return {}

    def save(self, path) -> None:
        arrays = model_arrays(self.model)
        arrays.update(self.optimizer.arrays())
        meta = dict(self.meta, step=self.step, epoch=self.epoch, opt_t=self.optimizer.t, task=self.model.task)
        save_checkpoint(path, self.config, arrays, meta)


class GradientAuditError(ContractError):
    pass


def audit_gradients(model: Model, touched: list[T.Tensor], step: int) -> None:
    """Check that exactly the declared trainables received gradients."""
    declared = {id(t): n for n, (t, _) in model.trainables().items()}
    got = {id(t) for t in touched}
    stray = got - set(declared)
    if stray:
        raise GradientAuditError(f"step {step}: {len(stray)} undeclared tensors received gradients")
    missing = [declared[i] for i in set(declared) - got]
    if missing:
        raise GradientAuditError(f"step {step}: declared trainables without gradient: {sorted(missing)}")
    if isinstance(model, MappedModel):
        for u in model.plan.units:
            st = u.state
            if not st.W0.requires_grad and st.W0.grad is not None:
                raise GradientAuditError(f"step {step}: fixed mapping matrix received a gradient")


def _clip(grads: dict[str, np.ndarray], names: set[str], max_norm: float | None) -> float:
    sel = [grads[n] for n in names if n in grads]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in sel)) if sel else 0.0
    if max_norm and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for n in names:
            if n in grads:
                grads[n] = grads[n] * f
    return norm


def train(cfg: dict, dataset: Dataset | None = None, out_dir: str | None = None, resume: str | None = None,
          hooks: Iterable[Callable] = (), model: Model | None = None) -> TrainResult:
    """Run the configured training loop.

    ``hooks`` are called as ``hook(step, model)`` before the first step and
    after every optimiser step.  With ``out_dir`` the resolved config,
    ``metrics.jsonl``, ``steps.jsonl`` and ``checkpoint.mnck`` are written
    there.  ``resume`` continues from a checkpoint written by an earlier run
    of the same config.
    """
    cfg = validate_config({k: v for k, v in cfg.items() if not k.startswith("_")})
    dataset = dataset if dataset is not None else load_dataset(cfg)
    task = dataset.task
    cfg["_task"] = task
    with T.default_dtype(_dtype(cfg)):
        return _train(cfg, dataset, task, out_dir, resume, list(hooks), model)


def _train(cfg, dataset, task, out_dir, resume, hooks, model):
    tcfg = cfg["train"]
    if model is None:
        model = build_model(cfg, task)
    opt = Optimizer(**cfg["optim"])
    step, start_epoch = 0, 0
    metrics: list[dict] = []
    if resume:
        rcfg, arrays, meta = load_checkpoint(resume)
        if {k: v for k, v in rcfg.items() if k != "train"} != {k: v for k, v in cfg.items() if k != "train"}:
            raise ConfigError("checkpoint was written by a different configuration", [("resume", str(resume))])
        for name in model.trainables():
            model.assign(name, arrays[name])
        opt.load_arrays(arrays, meta["opt_t"])
        step, start_epoch = meta["step"], meta["epoch"]
        metrics = list(meta.get("metrics", []))
    x_train, _ = dataset.split("train")
    steps_per_epoch = math.ceil(len(x_train) / tcfg["batch_size"])
    total_steps = steps_per_epoch * tcfg["epochs"]
    if tcfg["max_steps"] is not None:
        total_steps = min(total_steps, tcfg["max_steps"])
    count = sum(t.size for t, _ in model.trainables().values())
    checks = model.fixed_checksums()
    files = _open_logs(out_dir, cfg, resume is not None)
    min_lambda = min(model.lambdas().values(), default=float("nan"))
    t0 = time.perf_counter()
    log.info("training %s: %d trainable scalars, %d steps", cfg["mode"], count, total_steps)
    if step == 0:
        for h in hooks:
            h(0, model)
    epoch = start_epoch
    clip_names = model.clip_group()
    audit_steps = set(tcfg["audit_steps"] or [])
    audited: list[int] = []
    while step < total_steps:
        skip = step - epoch * steps_per_epoch
        term_sums: dict[str, float] = {}
        n_batches = 0
        for b, (xb, yb) in enumerate(batches(dataset, "train", tcfg["batch_size"], cfg["seeds"]["data"], epoch)):
            if b < skip:
                continue
            if step >= total_steps:
                break
            rng = np.random.default_rng([cfg["seeds"]["noise"], step])
            with T.Tape() as tape:
                total, values, _ = model.objective(T.Tensor._wrap(xb), yb, rng)
                touched = tape.backward(total)
            if step in audit_steps:
                audit_gradients(model, touched, step)
                audited.append(step)
            tr = model.trainables()
            grads = {n: t.grad * scale for n, (t, scale) in tr.items() if t.grad is not None}
            gnorm = _clip(grads, clip_names, cfg["optim"]["clip"] if clip_names else None)
            new = opt.step({n: (tr[n][0].data, g, tr[n][1]) for n, g in grads.items()},
                           lr=lr_at(cfg, step, total_steps))
            for n, v in new.items():
                model.assign(n, v)
            step += 1
            lams = model.lambdas()
            if lams:
                min_lambda = min(min_lambda, min(lams.values()))
            for k, v in values.items():
                term_sums[k] = term_sums.get(k, 0.0) + v
            n_batches += 1
            if files and step % tcfg["log_every"] == 0:
                rec = {"step": step, "epoch": epoch, "terms": values, "total": float(total.data),
                       "lambda": lams, "grad_norm": gnorm}
                files["steps"].write(json.dumps(rec) + "\n")
                files["steps"].flush()
            for h in hooks:
                h(step, model)
        end_of_epoch = step == (epoch + 1) * steps_per_epoch or step >= total_steps
        if end_of_epoch:
            epoch += 1
            if epoch % tcfg["eval_every"] == 0 or step >= total_steps:
                rec = _eval_record(cfg, model, dataset, step, epoch, term_sums, n_batches, count, min_lambda, t0)
                metrics.append(rec)
                if files:
                    files["metrics"].write(json.dumps(rec) + "\n")
                    files["metrics"].flush()
                log.info("epoch %d step %d %s", epoch, step, {k: rec[k] for k in ("train", "test") if k in rec})
    if checks and checks != model.fixed_checksums():
        raise ContractError("fixed mapping matrix changed during training")
    result = TrainResult(model, cfg, metrics, step, epoch, opt,
                         meta={"metrics": metrics, "w0_checksums": checks, "trainable_count": count,
                               "audited_steps": audited})
    if files:
        for fh in files.values():
            fh.close()
        result.save(os.path.join(out_dir, "checkpoint.mnck"))
    return result


def _eval_record(cfg, model, dataset, step, epoch, term_sums, n_batches, count, min_lambda, t0) -> dict:
    rec = {"step": step, "epoch": epoch, "mode": cfg["mode"], "trainable": count,
           "terms": {k: v / max(n_batches, 1) for k, v in term_sums.items()},
           "lambda": model.lambdas(), "min_lambda": min_lambda,
           "wall_clock": time.perf_counter() - t0, "peak_memory_mb": peak_memory_mb()}
    eb = cfg["train"]["eval_batch"]
    if cfg["train"]["eval_train"]:
        rec["train"] = evaluate(model, dataset, "train", batch_size=eb)
    if "test" in dataset:
        rec["test"] = evaluate(model, dataset, "test", batch_size=eb)
        if cfg["eval"]["prune"]:
            rec["test_pruned"] = evaluate(model, dataset, "test", prune=cfg["eval"]["prune"], batch_size=eb)
    return rec


def _open_logs(out_dir, cfg, append):
    if not out_dir:
        return None
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg) + "\n")
    mode = "a" if append else "w"
    return {"metrics": open(os.path.join(out_dir, "metrics.jsonl"), mode, encoding="utf-8"),
            "steps": open(os.path.join(out_dir, "steps.jsonl"), mode, encoding="utf-8")}


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_CELLS = {
    "task_only": {"loss.mask": []},
    "stab": {"loss.mask": ["stab"]},
    "smooth": {"loss.mask": ["smooth"]},
    "align": {"loss.mask": ["align"]},
    "stab+smooth": {"loss.mask": ["stab", "smooth"]},
    "stab+align": {"loss.mask": ["stab", "align"]},
    "smooth+align": {"loss.mask": ["smooth", "align"]},
    "full": {"loss.mask": ["stab", "smooth", "align"]},
    "no_modulation": {"mapping.variant": "no_modulation"},
    "lv_wmap": {"mapping.variant": "lv_wmap"},
    "full_dnn": {"mapping.variant": "full_dnn"},
    "lv_full_dnn": {"mapping.variant": "lv_full_dnn"},
}


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    from .config import set_dotted

    out = copy.deepcopy({k: v for k, v in cfg.items() if not k.startswith("_")})
    for k, v in overrides.items():
        set_dotted(out, k, v)
    return validate_config(out)


def ablation_sweep(cfg: dict, grid, dataset: Dataset | None = None, out_dir: str | None = None,
                   csv_path: str | None = None) -> list[dict]:
    """Run one training per grid cell with shared seeds; returns table rows.

    ``grid`` is a list of cell names from :data:`ABLATION_CELLS` or a dict
    ``name -> overrides``.  Each row holds the cell name, trainable count
    and final train/test metrics; with ``csv_path`` the table is written as
    CSV.
    """
    cells = {name: ABLATION_CELLS[name] for name in grid} if not isinstance(grid, dict) else grid
    base = validate_config(cfg)
    dataset = dataset if dataset is not None else load_dataset(base)
    rows = []
    for name, over in cells.items():
        ccfg = apply_overrides(base, over)
        cell_dir = os.path.join(out_dir, name) if out_dir else None
        res = train(ccfg, dataset, out_dir=cell_dir)
        row = {"cell": name, "mode": ccfg["mode"], "variant": ccfg["mapping"]["variant"],
               "mask": "+".join(ccfg["loss"]["mask"]) or "task", "alpha": ccfg["mapping"]["alpha"],
               "trainable": res.meta["trainable_count"]}
        for split in ("train", "test"):
            for k, v in res.final(split).items():
                if k != "n":
                    row[f"{split}_{k}"] = v
        rows.append(row)
    if csv_path:
        write_table(csv_path, rows)
    return rows


def write_table(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
