import json
import math

import numpy as np
import pytest

from mapnet import tensor as T
from mapnet.config import DEFAULTS, validate_config
from mapnet.data import Dataset, gaussian_blobs
from mapnet.errors import ConfigError, FormatError, NumericalAbort
from mapnet.losses import task_loss
from mapnet.trainer import (ABLATION_CELLS, GradientAuditError, Optimizer, ablation_sweep, audit_gradients,
                            build_model, count_trainables, evaluate, load_checkpoint, load_model, overfit_gap,
                            prune_mask, save_checkpoint, train)
from mapnet.zoo import build_spec, forward


def cfg(**over):
    base = {"mode": "slvt", "arch": {"kind": "mlp", "hyper": {"sizes": [2, 32, 2]}},
            "mapping": {"d": 8}, "optim": {"lr": 0.01},
            "train": {"epochs": 2, "batch_size": 32, "log_every": 1},
            "data": {"source": "synth", "synth": {"kind": "gaussian_blobs", "params": {"n": 320}}}}
    for k, v in over.items():
        node = base
        parts = k.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return base


def _strip(metrics):
    return [{k: v for k, v in r.items() if k not in ("wall_clock", "peak_memory_mb")} for r in metrics]


class TestCounts:
    @pytest.mark.parametrize("over", [{}, {"mode": "lwt", "mapping__d": 16, "mapping__max_ratio": None},
                                      {"mapping__variant": "lv_wmap"}, {"mode": "baseline"},
                                      {"loss__mask": []}, {"mapping__variant": "lv_full_dnn"},
                                      {"mode": "lwt", "mapping__d": [8, 8], "mapping__max_ratio": None,
                                       "loss__per_unit": True}])
    def test_planned_equals_built(self, over):
        c = validate_config(cfg(**over))
        assert count_trainables(c) == build_model(c).trainable_count()

    def test_slvt_2048_on_small_cnn(self):
        c = validate_config({"arch": {"kind": "cnn_small"}, "mapping": {"d": 2048}})
        assert count_trainables(c) == 2048 + 3
        P = build_spec(__import__("mapnet.zoo", fromlist=["x"]).cnn_small()).flat_size
        assert round(P / 2048) == 53

    def test_baseline_count_is_flat_size(self):
        c = validate_config(cfg(mode="baseline"))
        assert build_model(c).trainable_count() == 2 * 32 + 32 + 32 * 2 + 2


class TestTraining:
    def test_learns_and_logs(self, tmp_path):
        res = train(cfg(), out_dir=str(tmp_path))
        assert res.final("test")["accuracy"] > 95
        assert (tmp_path / "config.json").exists()
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[-1])
        assert {"step", "epoch", "terms", "lambda", "min_lambda", "wall_clock", "peak_memory_mb"} <= set(rec)
        steps = (tmp_path / "steps.jsonl").read_text().splitlines()
        assert len(steps) == res.step

    def test_resolved_config_written(self, tmp_path):
        train(cfg(), out_dir=str(tmp_path))
        written = json.loads((tmp_path / "config.json").read_text())
        assert written["optim"]["betas"] == DEFAULTS["optim"]["betas"]
        assert validate_config({k: v for k, v in written.items() if not k.startswith("_")}) == \
            {k: v for k, v in written.items() if not k.startswith("_")}

    def test_deterministic(self):
        a, b = train(cfg()), train(cfg())
        assert _strip(a.metrics) == _strip(b.metrics)
        np.testing.assert_array_equal(a.model.plan.units[0].state.z.data, b.model.plan.units[0].state.z.data)

    def test_resume_bit_identical(self, tmp_path):
        full = train(cfg(train__epochs=2))
        first = train(cfg(train__epochs=1), out_dir=str(tmp_path))
        resumed = train(cfg(train__epochs=2), resume=str(tmp_path / "checkpoint.mnck"))
        np.testing.assert_array_equal(full.model.plan.units[0].state.z.data,
                                      resumed.model.plan.units[0].state.z.data)
        assert _strip(full.metrics) == _strip(resumed.metrics)
        assert resumed.step == 2 * first.step == full.step

    def test_resume_rejects_other_config(self, tmp_path):
        train(cfg(train__epochs=1), out_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            train(cfg(mapping__alpha=0.2), resume=str(tmp_path / "checkpoint.mnck"))

    def test_audit_at_0_and_100(self):
        res = train(cfg(train__max_steps=101, train__epochs=20))
        assert res.meta["audited_steps"] == [0, 100]
        st = res.model.plan.units[0].state
        assert st.W0.grad is None and not st.W0.requires_grad
        assert set(res.model.trainables()) == {"unit0.z", "s.stab", "s.smooth", "s.align"}

    def test_audit_catches_stray_gradient(self):
        model = build_model(validate_config(cfg()))
        leak = T.Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(GradientAuditError):
            audit_gradients(model, [leak], 0)
        with pytest.raises(GradientAuditError, match="without gradient"):
            audit_gradients(model, [], 0)

    def test_w0_unchanged(self):
        model = build_model(validate_config(cfg()))
        before = model.fixed_checksums()
        res = train(cfg(), model=model)
        assert res.model.fixed_checksums() == before == res.meta["w0_checksums"]

    def test_non_finite_aborts(self):
        ds = gaussian_blobs(n=64)
        x, y = ds.split("train")
        x = x.copy()
        x[3, 0] = np.inf
        bad = Dataset({"train": (x, y)}, "classification")
        with pytest.raises(NumericalAbort):
            train(cfg(), bad)

    def test_regression_target(self):
        c = cfg(arch={"kind": "mlp", "hyper": {"sizes": [10, 16, 1]}}, mapping__d=8,
                data={"source": "synth", "synth": {"kind": "sine_mix", "params": {"length": 300, "window": 10}}})
        res = train(c)
        assert res.final("test")["mse"] < 0.2

    def test_lwt_and_variants_train(self):
        for over in ({"mode": "lwt", "mapping__d": 16, "mapping__max_ratio": None},
                     {"mapping__variant": "lv_wmap"}, {"mapping__variant": "full_dnn"}):
            res = train(cfg(train__epochs=1, **over))
            assert math.isfinite(res.final("test")["loss"])


class TestEvaluation:
    def test_twice_identical(self):
        res = train(cfg(train__epochs=1))
        ds = gaussian_blobs(n=320)
        assert evaluate(res.model, ds, "test") == evaluate(res.model, ds, "test")

    def test_saved_equals_restored(self, tmp_path):
        res = train(cfg(train__epochs=1), out_dir=str(tmp_path))
        model, _, _ = load_model(str(tmp_path / "checkpoint.mnck"))
        ds = gaussian_blobs(n=320)
        assert evaluate(model, ds, "test") == evaluate(res.model, ds, "test")

    def test_same_code_path_shapes(self):
        mapped = build_model(validate_config(cfg()))
        base = build_model(validate_config(cfg(mode="baseline")))
        assert [p.shape for p in mapped.inference_params()] == [p.shape for p in base.inference_params()]

    def test_prune_zero_is_identity(self):
        ps = [np.arange(6.0).reshape(2, 3), np.array([-1.0, 2.0])]
        out = prune_mask(ps, 0.0)
        for a, b in zip(ps, out):
            np.testing.assert_array_equal(a, b)

    def test_prune_ninety_percent(self):
        rng = np.random.default_rng(0)
        ps = [rng.standard_normal((7, 9)), rng.standard_normal(13)]
        out = prune_mask(ps, 0.9)
        flat_in = np.concatenate([p.ravel() for p in ps])
        flat_out = np.concatenate([p.ravel() for p in out])
        k = math.ceil(0.9 * flat_in.size)
        assert int((flat_out == 0).sum()) == k
        kept = np.abs(flat_in[flat_out != 0])
        assert kept.min() >= np.abs(flat_in[flat_out == 0]).max()

    def test_overfit_gap(self):
        assert overfit_gap({"accuracy": 90.0}, {"accuracy": 90.0}) == 0.0
        assert overfit_gap({"accuracy": 99.10}, {"accuracy": 92.89}) == pytest.approx(6.21)

    def test_missing_split(self):
        res = train(cfg(train__epochs=1))
        from mapnet.errors import DataError
        with pytest.raises(DataError):
            evaluate(res.model, Dataset({"train": gaussian_blobs().split("train")}), "test")


class TestAblation:
    def test_task_only_equals_task_loss(self):
        res = train(cfg(loss__mask=[], train__epochs=1))
        model = res.model
        ds = gaussian_blobs(n=320)
        x, y = ds.split("train")
        total, vals, _ = model.objective(T.Tensor._wrap(x[:32]), y[:32], np.random.default_rng(0))
        ref = task_loss(forward(model.arch, [T.Tensor._wrap(p) for p in model.inference_params()], x[:32]), y[:32])
        assert float(total.data) == float(ref.data) == vals["task"]

    def test_grid_single_sweep(self, tmp_path):
        grid = ["task_only", "stab", "smooth", "align", "stab+smooth", "stab+align", "smooth+align", "full"]
        rows = ablation_sweep(cfg(train__epochs=1), grid, csv_path=str(tmp_path / "t.csv"))
        assert [r["cell"] for r in rows] == grid
        assert rows[0]["trainable"] == 8 and rows[-1]["trainable"] == 11
        assert (tmp_path / "t.csv").read_text().count("\n") == len(grid) + 1

    def test_no_modulation_cell(self):
        rows = ablation_sweep(cfg(train__epochs=1), ["no_modulation"])
        assert rows[0]["variant"] == "no_modulation"
        c = validate_config(cfg(mapping__variant="no_modulation"))
        assert build_model(c).plan.units[0].state.alpha == 0.0

    def test_known_cells(self):
        assert {"task_only", "full", "no_modulation", "lv_wmap", "full_dnn", "lv_full_dnn"} <= set(ABLATION_CELLS)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.array(1.5), "i": np.arange(3)}
        save_checkpoint(tmp_path / "c", {"x": 1}, arrays, {"step": 4})
        c, arr, meta = load_checkpoint(tmp_path / "c")
        assert c == {"x": 1} and meta == {"step": 4}
        for k, v in arrays.items():
            assert arr[k].shape == v.shape and arr[k].dtype == v.dtype
            np.testing.assert_array_equal(arr[k], v)

    def test_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "bad")
        save_checkpoint(tmp_path / "c", {}, {"a": np.ones(100)}, {})
        raw = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c")


class TestOptimizer:
    def test_adam_first_step_is_lr_sign(self):
        opt = Optimizer("adam", lr=0.1)
        new = opt.step({"w": (np.array([1.0, 1.0]), np.array([3.0, -0.5]), 1.0)})
        np.testing.assert_allclose(new["w"], [0.9, 1.1], rtol=1e-6)

    def test_sgd_momentum(self):
        opt = Optimizer("sgd", lr=0.1, momentum=0.5)
        w = np.array([1.0])
        w = opt.step({"w": (w, np.array([1.0]), 1.0)})["w"]
        w = opt.step({"w": (w, np.array([1.0]), 1.0)})["w"]
        np.testing.assert_allclose(w, [1.0 - 0.1 - 0.15])

    def test_scale_applies_to_latent_units(self):
        opt = Optimizer("sgd", lr=0.1, momentum=0.0)
        new = opt.step({"z": (np.array([0.0]), np.array([1.0]), 0.01)})
        np.testing.assert_allclose(new["z"], [-0.001])


class TestConfig:
    def test_minimal_resolves_defaults(self):
        r = validate_config("{}")
        assert r["mapping"]["d"] == 2048 and r["optim"]["clip"] == 5.0 and r["loss"]["mask"] == ["stab", "smooth", "align"]

    def test_guard(self):
        with pytest.raises(ConfigError, match="d << P") as exc:
            validate_config(cfg(mapping__d=100))
        assert exc.value.errors[0][0] == "mapping.d"

    def test_all_errors_at_once(self):
        with pytest.raises(ConfigError) as exc:
            validate_config(cfg(mapping__alpha=-1, optim__lr=0, train__batch_size=0, bogus=1))
        keys = {k for k, _ in exc.value.errors}
        assert {"mapping.alpha", "optim.lr", "train.batch_size", "bogus"} <= keys
