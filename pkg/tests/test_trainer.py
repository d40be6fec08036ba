import json

import numpy as np
import pytest

from cisrnet.core import ParamStore, Tensor
from cisrnet.data import LoadedPair, PatchSampler, degrade, synthetic_image
from cisrnet.errors import ConfigError, DataError, NumericError
from cisrnet.loss import FeatureExtractor
from cisrnet.model import CisrModel, ModelConfig
from cisrnet.trainer import (
    STAGE1,
    STAGE2,
    Adam,
    StageSchedule,
    TrainState,
    clip_grad_norm,
    load_checkpoint,
    run_stage,
    run_stage1,
    run_stage2,
    save_checkpoint,
)

TINY = ModelConfig(scale=2, channels=8, coarse_groups=1, coarse_blocks=1, fine_groups=1, fine_blocks=1, reduction=4)


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(21)
    out = []
    for i in range(3):
        hr = synthetic_image(rng, 48, 48)
        out.append(LoadedPair(f"p{i}", degrade(hr, 2, 10, min_lr=8), hr))
    return out


@pytest.fixture
def sampler(pairs):
    return PatchSampler(pairs, 2, batch_size=2, patch=8)


def short(epochs=4, decay=2, spe=2, **kw):
    return StageSchedule(epochs=epochs, lr=1e-3, decay_epoch=decay, steps_per_epoch=spe, **kw)


def scalar_store(value):
    ps = ParamStore()
    ps.add("x", Tensor(np.array([value], dtype=np.float64)))
    return ps


def snapshot(store):
    return {k: v.copy() for k, v in store.state_dict().items()}


class TestAdam:
    def test_zero_gradient_fresh(self):
        ps = scalar_store(0.7)
        ps["x"].grad = np.zeros(1)
        opt = Adam()
        opt.step(ps, 0.1)
        assert ps["x"].data[0] == 0.7

    def test_moments_decay(self):
        ps = scalar_store(0.0)
        opt = Adam()
        ps["x"].grad = np.array([2.0])
        opt.step(ps, 0.01)
        m0, v0 = opt.m["x"].copy(), opt.v["x"].copy()
        ps["x"].grad = np.zeros(1)
        opt.step(ps, 0.01)
        assert opt.m["x"][0] == pytest.approx(0.9 * m0[0]) and opt.v["x"][0] == pytest.approx(0.999 * v0[0])

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
    def test_first_step_closed_form(self, g):
        ps = scalar_store(1.0)
        ps["x"].grad = np.array([g])
        Adam().step(ps, 0.01)
        # m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
        assert ps["x"].data[0] == pytest.approx(1.0 - 0.01 * g / (abs(g) + 1e-8), abs=1e-15)

    def test_quadratic_bowl(self):
        ps = scalar_store(1.0)
        opt = Adam()
        for _ in range(500):
            ps["x"].grad = 2 * ps["x"].data
            opt.step(ps, 0.1)
        assert abs(ps["x"].data[0]) < 1e-3

    def test_non_finite_names_parameter(self):
        ps = scalar_store(1.0)
        ps.add("layer.weight", Tensor(np.zeros(2)))
        ps["x"].grad = np.zeros(1)
        ps["layer.weight"].grad = np.array([0.0, np.nan])
        with pytest.raises(NumericError, match="layer.weight"):
            Adam().step(ps, 0.1)
        assert ps["x"].data[0] == 1.0

    def test_defaults(self):
        opt = Adam()
        assert (opt.beta1, opt.beta2, opt.eps) == (0.9, 0.999, 1e-8)


class TestClip:
    def test_clip_scales_to_max(self):
        ps = scalar_store(0.0)
        ps.add("y", Tensor(np.zeros(1)))
        ps["x"].grad, ps["y"].grad = np.array([3.0]), np.array([4.0])
        assert clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
        assert np.hypot(ps["x"].grad[0], ps["y"].grad[0]) == pytest.approx(1.0, abs=1e-6)
        assert ps["x"].grad[0] / ps["y"].grad[0] == pytest.approx(0.75)

    def test_no_clip_below(self):
        ps = scalar_store(0.0)
        ps["x"].grad = np.array([0.5])
        clip_grad_norm(ps, 1.0)
        assert ps["x"].grad[0] == 0.5


class TestSchedule:
    def test_paper_stage1_trace(self):
        for e in range(1, 101):
            assert STAGE1.lr_at(e) == (1e-4 if e <= 75 else 1e-4 * 0.1)
        assert STAGE1.lr_at(76) == pytest.approx(1e-5, rel=1e-12)
        assert STAGE1.loss == "l1" and STAGE1.clip_grad_norm is None

    def test_paper_stage2_trace(self):
        for e in range(1, 201):
            assert STAGE2.lr_at(e) == (0.75e-4 if e <= 150 else 0.75e-4 * 0.1)
        assert STAGE2.lr_at(151) == pytest.approx(0.75e-5, rel=1e-12)
        assert STAGE2.clip_grad_norm == 1.0

    def test_epoch_of(self):
        s = short(spe=3)
        assert [s.epoch_of(i) for i in range(7)] == [1, 1, 1, 2, 2, 2, 3]
        assert s.total_steps == 12

    @pytest.mark.parametrize(
        "kw", [{"decay_epoch": 4}, {"decay_epoch": 0}, {"lr": 0.0}, {"epochs": 0}, {"clip_grad_norm": -1.0}, {"loss": "mse"}]
    )
    def test_invalid(self, kw):
        base = {"epochs": 4, "lr": 1e-3, "decay_epoch": 2}
        with pytest.raises(ConfigError):
            StageSchedule(**{**base, **kw})

    def test_out_of_range_epoch(self):
        with pytest.raises(ValueError):
            STAGE1.lr_at(0)
        with pytest.raises(ValueError):
            STAGE1.lr_at(101)

    def test_dict_roundtrip(self):
        assert StageSchedule.from_dict(STAGE2.to_dict()) == STAGE2
        with pytest.raises(ConfigError):
            StageSchedule.from_dict({**STAGE2.to_dict(), "warmup": 3})


class TestStages:
    def test_stage1_isolation(self, sampler):
        m = CisrModel(TINY, seed=1)
        before_refine = snapshot(m.refine_params())
        before_coarse = snapshot(m.coarse_params())
        state = run_stage1(m, sampler, short(), seed=0)
        after = m.refine_params().state_dict()
        assert all(np.array_equal(before_refine[k], after[k]) for k in before_refine)
        assert any(not np.array_equal(before_coarse[k], v) for k, v in m.coarse_params().state_dict().items())
        assert set(state.optimizer.m) == set(m.coarse_params().names())

    def test_stage2_one_step_moves_both(self, sampler):
        m = CisrModel(TINY, seed=1)
        coarse0, refine0 = snapshot(m.coarse_params()), snapshot(m.refine_params())
        run_stage2(m, sampler, short(clip_grad_norm=1.0), seed=0, extractor=FeatureExtractor(width=1 / 16), stop_after=1)
        assert any(not np.array_equal(coarse0[k], v) for k, v in m.coarse_params().state_dict().items())
        assert any(not np.array_equal(refine0[k], v) for k, v in m.refine_params().state_dict().items())

    def test_lr_trace_and_log(self, sampler, tmp_path):
        m = CisrModel(TINY, seed=1)
        log = tmp_path / "train.jsonl"
        state = run_stage1(m, sampler, short(epochs=3, decay=1, spe=2), seed=0, log_path=log)
        assert [r["lr"] for r in state.history] == [1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4]
        assert [r["epoch"] for r in state.history] == [1, 1, 2, 2, 3, 3]
        recs = [json.loads(line) for line in log.read_text().splitlines()]
        assert recs == state.history
        assert set(recs[0]) >= {"stage", "epoch", "step", "lr", "loss", "l1"}
        assert recs[0]["loss"] == pytest.approx(0.1 * recs[0]["l1"])

    def test_stage2_l1_mode_needs_no_extractor(self, sampler):
        m = CisrModel(TINY, seed=1)
        state = run_stage2(m, sampler, short(loss="l1"), seed=0, stop_after=2)
        assert "perceptual" not in state.history[0] and state.step == 2

    def test_content_needs_extractor(self, sampler):
        with pytest.raises(ConfigError):
            run_stage2(CisrModel(TINY), sampler, short(), seed=0, stop_after=1)

    def test_loss_decreases(self, pairs):
        m = CisrModel(TINY, seed=2)
        s = PatchSampler(pairs, 2, batch_size=4, patch=12)
        state = run_stage1(m, s, StageSchedule(epochs=100, lr=2e-3, decay_epoch=90, steps_per_epoch=2, loss="l1"), seed=0)
        losses = [r["loss"] for r in state.history]
        assert len(losses) == 200
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_same_seed_same_trace(self, sampler):
        runs = []
        for _ in range(2):
            m = CisrModel(TINY, seed=3)
            runs.append((run_stage1(m, sampler, short(), seed=5).history, snapshot(m.params)))
        assert runs[0][0] == runs[1][0]
        assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    def test_scale_mismatch(self, sampler):
        with pytest.raises(ConfigError):
            run_stage1(CisrModel(TINY.replace(scale=3)), sampler, short())

    def test_wrong_stage_state(self, sampler):
        with pytest.raises(ConfigError):
            run_stage(CisrModel(TINY), sampler, short(), 2, state=TrainState.fresh(1, 0), extractor=lambda x: x)
        with pytest.raises(ConfigError):
            run_stage(CisrModel(TINY), sampler, short(), 3)

    def test_numeric_abort_keeps_last_checkpoint(self, sampler, tmp_path):
        m = CisrModel(TINY, seed=1)
        sched = short(epochs=4, spe=2)
        run_stage1(m, sampler, sched, seed=0, checkpoint_dir=tmp_path, checkpoint_every=2, stop_after=2)
        good = (tmp_path / "stage1-last.npz").read_bytes()
        m.params["coarse.recon.bias"].data[:] = np.inf
        with pytest.raises(NumericError):
            run_stage1(m, sampler, sched, seed=0, checkpoint_dir=tmp_path, checkpoint_every=1)
        assert (tmp_path / "stage1-last.npz").read_bytes() == good
        assert not (tmp_path / "stage1-final.npz").exists()


class TestCheckpoint:
    def test_roundtrip_bit_identical(self, sampler, tmp_path):
        m = CisrModel(TINY, seed=4)
        state = run_stage1(m, sampler, short(), seed=0, stop_after=3)
        path = tmp_path / "c.npz"
        save_checkpoint(path, m, state, short())
        m2, s2, meta = load_checkpoint(path)
        assert m2.config == m.config and meta["schedule"] == short().to_dict()
        for k, v in m.params.state_dict().items():
            assert np.array_equal(v, m2.params[k].data) and v.dtype == m2.params[k].data.dtype
        for k in state.optimizer.m:
            assert np.array_equal(state.optimizer.m[k], s2.optimizer.m[k])
            assert np.array_equal(state.optimizer.v[k], s2.optimizer.v[k])
        assert s2.step == 3 and s2.optimizer.t == 3 and s2.history == state.history
        assert s2.rng.bit_generator.state == state.rng.bit_generator.state

    @pytest.mark.parametrize("stage", [1, 2])
    def test_resume_reproduces_trace(self, sampler, tmp_path, stage):
        sched = short(epochs=3, decay=1, spe=3, clip_grad_norm=1.0 if stage == 2 else None)
        kw = {"extractor": FeatureExtractor(width=1 / 16)} if stage == 2 else {}
        full = CisrModel(TINY, seed=6)
        ref = run_stage(full, sampler, sched, stage, seed=2, **kw)

        part = CisrModel(TINY, seed=6)
        run_stage(part, sampler, sched, stage, seed=2, checkpoint_dir=tmp_path, checkpoint_every=4, stop_after=4, **kw)
        model, state, _ = load_checkpoint(tmp_path / f"stage{stage}-last.npz", TINY)
        resumed = run_stage(model, sampler, sched, stage, state=state, **kw)
        assert [r["step"] for r in resumed.history] == list(range(1, 10))
        assert resumed.history == ref.history
        for k, v in full.params.state_dict().items():
            assert np.array_equal(v, model.params[k].data), k

    def test_scale_mismatch_rejected(self, tmp_path):
        save_checkpoint(tmp_path / "x2.npz", CisrModel(TINY))
        with pytest.raises(ConfigError, match="scale"):
            load_checkpoint(tmp_path / "x2.npz", TINY.replace(scale=3))

    def test_shape_mismatch_rejected(self, tmp_path):
        m = CisrModel(TINY)
        save_checkpoint(tmp_path / "c.npz", m)
        with np.load(tmp_path / "c.npz") as z:
            arrays = {k: z[k] for k in z.files}
        arrays["param/coarse.shallow.weight"] = np.zeros((2, 3, 3, 3), np.float32)
        np.savez(tmp_path / "bad.npz", **arrays)
        with pytest.raises(Exception) as exc:
            load_checkpoint(tmp_path / "bad.npz")
        assert "coarse.shallow.weight" in str(exc.value)

    def test_missing_and_foreign(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.npz")
        np.savez(tmp_path / "f.npz", a=np.zeros(1))
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "f.npz")
