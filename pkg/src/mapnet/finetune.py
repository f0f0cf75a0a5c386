"""Fine-tuning frozen weights through grouped modulation vectors.

The selected weights ``W_f`` (layers named in the config, flattened in spec
order, row-major within each tensor) are split into consecutive groups of
``L``; the last group may be shorter.  A generator unit produces one
modulation value ``o_g`` per group and weight ``k`` becomes
``w_k + alpha_l * o[k // L]`` where ``alpha_l`` is the scale of the layer
``k`` belongs to.  Only the generator's latent (and the loss log-weights)
are trained.

Pretrained weights are exchanged as a flat little-endian binary file plus a
JSON manifest::

    {"format": "mapnet-flat-v1", "dtype": "<f4",
     "arrays": [{"name": "fc1.weight", "shape": [784, 128]}, ...]}

The binary holds the arrays back to back in manifest order.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, PretrainedImportError
from .losses import LossBundle, objective
from .mapping import MappingState, checksum, generate, make_state
from .trainer import Model, TrainResult, train
from .zoo import TargetArchitecture, build_spec

MANIFEST_FORMAT = "mapnet-flat-v1"


def group_count(n: int, L: int) -> int:
    return int(math.ceil(n / L))


def expand_groups(o: T.Tensor, n: int, L: int) -> T.Tensor:
    """Length-``n`` vector with entry ``k`` equal to ``o[k // L]``."""
    groups = group_count(n, L)
    if o.ndim != 1 or o.shape[0] != groups:
        raise ContractError(f"modulation vector has length {o.shape[0] if o.ndim else 0}, expected ceil({n}/{L}) = {groups}")
    full, rem = divmod(n, L)
    pieces = []
    if full:
        head = o if rem == 0 else o[:full]
        ones = T.Tensor(np.ones(L), dtype=o.dtype)
        pieces.append(T.reshape(T.outer(head, ones), (full * L,)))
    if rem:
        tail = T.reshape(o[full:full + 1], (1,))
        pieces.append(T.mul(T.Tensor(np.ones(rem), dtype=o.dtype), T.sum(tail)))
    return pieces[0] if len(pieces) == 1 else T.concat(pieces)


def apply_modulation(w_flat, o, alpha: float, L: int) -> T.Tensor:
    """``w_k + alpha * o[k // L]``; ``w_flat`` itself is left untouched."""
    w = w_flat if isinstance(w_flat, T.Tensor) else T.Tensor(w_flat)
    o = o if isinstance(o, T.Tensor) else T.Tensor(o, dtype=w.dtype)
    if L < 1:
        raise ContractError(f"group size must be >= 1, got {L}")
    delta = expand_groups(o, w.shape[0], L)
    return T.add(w, T.mul(delta, alpha))


# -- import / export ----------------------------------------------------------

def export_pretrained(path, manifest_path, named: dict[str, np.ndarray], dtype="<f4") -> None:
    """Write arrays (in dict order) as a flat binary plus manifest."""
    entries = []
    with open(path, "wb") as fh:
        for name, arr in named.items():
            arr = np.asarray(arr)
            fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())
            entries.append({"name": name, "shape": list(arr.shape)})
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump({"format": MANIFEST_FORMAT, "dtype": dtype, "arrays": entries}, fh, indent=2)


def import_pretrained(path, manifest_path, arch: TargetArchitecture | None = None) -> dict[str, np.ndarray]:
    """Read a flat binary described by a manifest.

    With ``arch`` every manifest entry must name a layer of that
    architecture with the matching shape.  Nothing is returned unless the
    whole file validates.
    """
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PretrainedImportError(f"cannot read manifest {manifest_path}: {exc}") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise PretrainedImportError(f"{manifest_path}: unsupported manifest format {manifest.get('format')!r}")
    try:
        dtype = np.dtype(manifest.get("dtype", "<f4"))
    except TypeError:
        raise PretrainedImportError(f"{manifest_path}: bad dtype {manifest.get('dtype')!r}") from None
    entries = manifest.get("arrays", [])
    spec = build_spec(arch) if arch is not None else None
    for i, e in enumerate(entries):
        name, shape = e.get("name"), tuple(e.get("shape", ()))
        if spec is not None:
            if name not in spec.names:
                raise PretrainedImportError(f"manifest entry {i}: unknown layer name {name!r}")
            want = spec.layers[spec.index(name)].shape
            if shape != want:
                raise PretrainedImportError(f"manifest entry {i} ({name}): shape {list(shape)} differs from architecture {list(want)}")
    need = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * dtype.itemsize
    size = os.path.getsize(path) if os.path.exists(path) else None
    if size is None:
        raise PretrainedImportError(f"weights file not found: {path}")
    if size != need:
        off = 0
        for e in entries:
            nbytes = int(np.prod(e["shape"], dtype=np.int64)) * dtype.itemsize
            if off + nbytes > size:
                raise PretrainedImportError(
                    f"{path}: truncated at array {e['name']!r} (needs bytes {off}..{off + nbytes}, file has {size})")
            off += nbytes
        raise PretrainedImportError(f"{path}: {size - need} trailing bytes after the last manifest array")
    with open(path, "rb") as fh:
        raw = fh.read()
    out, off = {}, 0
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(e["shape"])
        out[e["name"]] = arr.astype(dtype.newbyteorder("="))
        off += count * dtype.itemsize
    return out


# -- model --------------------------------------------------------------------

class FinetuneModel(Model):
    """Frozen network plus a generator of grouped modulation values."""

    def __init__(self, arch: TargetArchitecture, frozen: dict[str, np.ndarray], layers, state: MappingState,
                 bundle: LossBundle, L: int, alphas: dict[str, float], task: str = "classification"):
        self.arch = arch
        self.task = task
        self.spec = build_spec(arch)
        missing = [n for n in self.spec.names if n not in frozen]
        if missing:
            raise ConfigError(f"pretrained weights lack layers {missing}", [("finetune.pretrained", "incomplete")])
        unknown = [n for n in layers if n not in self.spec.names]
        if unknown or not layers:
            raise ConfigError(f"fine-tune selector names unknown layers {unknown}" if unknown else "no layers selected",
                              [("finetune.layers", f"unknown: {unknown}" if unknown else "empty")])
        self.layers = [n for n in self.spec.names if n in set(layers)]
        self.frozen = [T.Tensor._wrap(np.asarray(frozen[n], dtype=T.get_default_dtype())) for n in self.spec.names]
        self.state = state
        self.bundle = bundle
        bundle.task = task
        self.L = int(L)
        self.alphas = {n: float(alphas.get(n, 0.1)) for n in self.layers}
        self.sizes = [self.spec.layers[self.spec.index(n)].size for n in self.layers]
        self.n_tuned = sum(self.sizes)
        if state.P != group_count(self.n_tuned, self.L):
            raise ContractError(f"generator length {state.P} != group count ceil({self.n_tuned}/{self.L})")

    def _assemble(self, thetas):
        delta = expand_groups(thetas[0], self.n_tuned, self.L)
        params = list(self.frozen)
        off = 0
        for name, size in zip(self.layers, self.sizes):
            i = self.spec.index(name)
            alpha = self.alphas[name]
            if alpha:
                piece = T.reshape(T.mul(delta[off:off + size], alpha), self.spec.layers[i].shape)
                params[i] = T.add(self.frozen[i], piece)
            off += size
        return params

    def trainables(self):
        out = {f"unit0.{k}": (v, self.state.z_scale if k in ("z", "wmap") else 1.0)
               for k, v in self.state.trainable().items()}
        out.update({k: (v, 1.0) for k, v in self.bundle.trainable().items()})
        return out

    def assign(self, name, value):
        if name.startswith("s."):
            self.bundle.assign(name[2:], value)
        else:
            self.state.assign(name.split(".", 1)[1], value)

    def objective(self, x, y, rng):
        return objective([self.state], self._assemble, self.bundle, x, y, rng, self.forward)

    def inference_params(self):
        return [p.data for p in self._assemble([generate(self.state)])]

    def modulation(self) -> np.ndarray:
        return generate(self.state).data

    def clip_group(self):
        return {n for n in self.trainables() if n.startswith("unit")}

    def lambdas(self):
        return self.bundle.lambdas()

    def fixed_checksums(self):
        outside = [checksum(p.data) for n, p in zip(self.spec.names, self.frozen) if n not in self.layers]
        return outside + [checksum(self.state.W0.data)]

    def outside_checksums(self) -> dict[str, str]:
        params = self.inference_params()
        return {n: checksum(p) for n, p in zip(self.spec.names, params) if n not in self.layers}


def build_finetune(cfg: dict, frozen: dict[str, np.ndarray] | None = None, task: str = "classification") -> FinetuneModel:
    """Finetune model from a resolved config (imports the pretrained file when ``frozen`` is None)."""
    f = cfg["finetune"]
    arch = TargetArchitecture.from_dict(cfg["arch"])
    if frozen is None:
        if not f["pretrained"] or not f["manifest"]:
            raise ConfigError("fine-tuning needs finetune.pretrained and finetune.manifest",
                              [("finetune.pretrained", "required"), ("finetune.manifest", "required")])
        frozen = import_pretrained(f["pretrained"], f["manifest"], arch)
    spec = build_spec(arch)
    layers = list(f["layers"])
    unknown = [n for n in layers if n not in spec.names]
    if unknown or not layers:
        raise ConfigError(f"fine-tune selector names unknown layers {unknown}" if unknown else "finetune.layers is empty",
                          [("finetune.layers", f"unknown: {unknown}" if unknown else "empty")])
    n = sum(spec.layers[spec.index(name)].size for name in layers)
    groups = group_count(n, f["group"])
    m = cfg["mapping"]
    dtype = np.float64 if cfg["precision"] == "f64" else np.float32
    state = make_state(groups, int(m["d"]), cfg["seeds"]["init"], alpha=m["alpha"], activation=m["activation"],
                       out_scale=m["out_scale"], z_scale=m["z_scale"], target_rms=m["target_rms"],
                       max_ratio=m["max_ratio"], dtype=dtype)
    lo = cfg["loss"]
    bundle = LossBundle(mask=tuple(lo["mask"]), sigma=lo["sigma"], probes=lo["probes"], s_init=lo["s_init"],
                        max_lambda=lo["max_lambda"], task=task)
    alphas = {name: f["alpha"].get(name, f["default_alpha"]) for name in layers}
    return FinetuneModel(arch, frozen, layers, state, bundle, f["group"], alphas, task)


def finetune(cfg: dict, dataset, frozen: dict[str, np.ndarray] | None = None, out_dir: str | None = None) -> TrainResult:
    """Train the modulation generator on ``dataset`` with the weights frozen."""
    from .config import dumps, validate_config

    cfg = validate_config({k: v for k, v in cfg.items() if not k.startswith("_")})
    with T.default_dtype(np.float64 if cfg["precision"] == "f64" else np.float32):
        model = build_finetune(cfg, frozen, dataset.task)
    cfg = dict(cfg)
    res = train(cfg, dataset, out_dir=out_dir, model=model)
    res.config["_kind"] = "finetune"
    if out_dir:
        res.save(os.path.join(out_dir, "checkpoint.mnck"))
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(dumps(res.config) + "\n")
    return res


def restore_finetune(cfg: dict, arrays: dict[str, np.ndarray]) -> FinetuneModel:
    model = build_finetune(cfg, task=cfg.get("_task", "classification"))
    for name in model.trainables():
        model.assign(name, arrays[name])
    return model
