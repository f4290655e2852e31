import csv
import os

import numpy as np
import pytest

from meshfield import autodiff as ad
from meshfield import sampling
from meshfield import toys
from meshfield import trainer
from meshfield.config import RunConfig, StageConfig
from meshfield.dataset import camera_rays, load_transforms


def tiny_run_config(**overrides) -> RunConfig:
    base = dict(
        resolution=6,
        model_width=16,
        encoding_degree=2,
        seed=3,
        stage1=StageConfig(steps=12, batch_pixels=24),
        stage2=StageConfig(steps=8, batch_pixels=8),
        finetune=StageConfig(steps=5, batch_pixels=8),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def toy_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    toys.generate_toy_dataset("single", str(d), n_train=4, n_test=2, width=20, height=20)
    return load_transforms(str(d), "train")


def make_batch(state, dataset, n_pixels=6, supersample=1, seed=0):
    rng = np.random.default_rng(seed)
    s2 = supersample * supersample
    cam = dataset.cameras[0]
    o, d = camera_rays(cam, supersample)
    h, w = dataset.images.shape[1:3]
    # pick pixels that actually see the object (center block)
    ys, xs = np.meshgrid(
        np.arange(h // 2 - 3, h // 2 + 3), np.arange(w // 2 - 3, w // 2 + 3), indexing="ij"
    )
    pix = (ys.ravel() * w + xs.ravel())[rng.permutation(36)[:n_pixels]]
    sub = (pix[:, None] * s2 + np.arange(s2)[None, :]).reshape(-1)
    gt = dataset.images[0].reshape(-1, 3)[pix]
    return o[sub], d[sub], gt


class TestStageForward:
    def test_gradients_match_frozen_quadrature_fd_stage1(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        # non-trivial geometry so barycentric routing is exercised
        rng = np.random.default_rng(1)
        state.offsets.values[:] = rng.uniform(-0.3, 0.3, state.offsets.values.shape)
        origins, dirs, gt = make_batch(state, toy_dataset, n_pixels=5)
        limit = 18
        quad = sampling.sample_rays(
            origins, dirs, state.lattice_cfg, state.topo, state.world_vertices(), limit
        )
        assert len(quad) > 3

        params = state.main_parameters()
        ad.zero_grads(params)
        with ad.Tape() as tape:
            total, _ = trainer.stage_forward(state, quad, dirs, gt, trainer.STAGE1, limit, 1)
        ad.backward(tape, total)

        def loss_now():
            # grid objective excluded: its weight inputs are stop-gradiented
            t, _ = trainer.stage_forward(
                state, quad, dirs, gt, trainer.STAGE1, limit, 1, include_grid=False
            )
            return float(t.values)

        h = 1e-6
        rng = np.random.default_rng(2)
        checked = 0
        for p in [state.offsets] + list(rng.choice(params[1:], 4, replace=False)):
            flat = p.values.reshape(-1)
            gflat = (p.grad if p.grad is not None else np.zeros_like(p.values)).reshape(-1)
            for j in rng.integers(0, flat.size, size=3):
                orig = flat[j]
                flat[j] = orig + h
                fp = loss_now()
                flat[j] = orig - h
                fm = loss_now()
                flat[j] = orig
                num = (fp - fm) / (2 * h)
                assert gflat[j] == pytest.approx(num, rel=1e-3, abs=1e-6), p.name
                checked += 1
        assert checked >= 12

    def test_gradients_match_fd_stage2_smooth_params(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        rng = np.random.default_rng(3)
        state.offsets.values[:] = rng.uniform(-0.2, 0.2, state.offsets.values.shape)
        origins, dirs, gt = make_batch(state, toy_dataset, n_pixels=4, supersample=2)
        limit = 12
        quad = sampling.sample_rays(
            origins, dirs, state.lattice_cfg, state.topo, state.world_vertices(), limit
        )
        params = state.params.feature_parameters() + state.params.shader_parameters()
        ad.zero_grads(state.main_parameters())
        with ad.Tape() as tape:
            total, _ = trainer.stage_forward(state, quad, dirs, gt, trainer.STAGE2, limit, 2)
        ad.backward(tape, total)

        def loss_now():
            t, _ = trainer.stage_forward(
                state, quad, dirs, gt, trainer.STAGE2, limit, 2, include_grid=False
            )
            return float(t.values)

        h = 1e-6
        for p in params[::3]:
            flat = p.values.reshape(-1)
            gflat = p.grad.reshape(-1)
            for j in np.random.default_rng(4).integers(0, flat.size, size=2):
                orig = flat[j]
                flat[j] = orig + h
                fp = loss_now()
                flat[j] = orig - h
                fm = loss_now()
                flat[j] = orig
                assert gflat[j] == pytest.approx((fp - fm) / (2 * h), rel=1e-3, abs=1e-6)

    def test_identical_binary_and_continuous_when_alpha_saturated(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        # drive opacity to exactly 1.0 in float64
        state.params.opacity.head[0].values[:] = 0.0
        state.params.opacity.head[1].values[:] = 1000.0
        origins, dirs, gt = make_batch(state, toy_dataset, n_pixels=4, supersample=2)
        quad = sampling.sample_rays(
            origins, dirs, state.lattice_cfg, state.topo, state.world_vertices(), 12
        )
        assert len(quad)
        _, terms = trainer.stage_forward(state, quad, dirs, gt, trainer.STAGE2, 12, 2)
        assert terms["binary"] == terms["color"]

    def test_empty_batch_is_handled(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        origins = np.tile([5.0, 5.0, 5.0], (4, 1))
        dirs = np.tile([1.0, 0.0, 0.0], (4, 1))
        gt = np.zeros((4, 3))
        quad = sampling.sample_rays(
            origins, dirs, state.lattice_cfg, state.topo, state.world_vertices(), 12
        )
        assert len(quad) == 0
        with ad.Tape() as tape:
            total, terms = trainer.stage_forward(state, quad, dirs, gt, trainer.STAGE1, 12, 1)
        ad.backward(tape, total)
        assert np.isfinite(terms["total"])


class TestTraining:
    def test_loss_decreases_and_logs(self, toy_dataset, tmp_path):
        run = tiny_run_config(stage1=StageConfig(steps=60, batch_pixels=48))
        state = trainer.new_state(run)
        log = str(tmp_path / "log.csv")
        trainer.train_stage1(state, toy_dataset, log_path=log)
        rows = list(csv.DictReader(open(log)))
        assert len(rows) == 60
        first = np.mean([float(r["color"]) for r in rows[:8]])
        last = np.mean([float(r["color"]) for r in rows[-8:]])
        assert last < first * 0.7

    def test_schedule_followed_in_log(self, toy_dataset, tmp_path):
        run = tiny_run_config(stage1=StageConfig(steps=16, batch_pixels=4))
        state = trainer.new_state(run)
        log = str(tmp_path / "log.csv")
        trainer.train_stage1(state, toy_dataset, log_path=log)
        rows = list(csv.DictReader(open(log)))
        p = run.resolution
        for r in rows:
            step = int(r["step"])
            progress = step / 16
            if progress < 0.25:
                assert int(r["limit"]) == 3 * p and int(r["batch_rays"]) == 4
            elif progress < 0.5:
                assert int(r["limit"]) == 3 * p // 2 and int(r["batch_rays"]) == 8
            else:
                assert int(r["limit"]) == 3 * p // 4 and int(r["batch_rays"]) == 16

    def test_stage_order_enforced(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        with pytest.raises(ValueError, match="stage 1"):
            trainer.train_stage2(state, toy_dataset)
        with pytest.raises(ValueError, match="stage 2"):
            trainer.finetune(state, toy_dataset)

    def test_finetune_freezes_everything_but_features_and_shader(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        trainer.train_stage1(state, toy_dataset)
        trainer.train_stage2(state, toy_dataset)
        # make sure the hard-surface branch is live so features get gradients
        state.params.opacity.head[1].values[:] = 3.0
        state.grid.values.values[:] = 1.0
        before_off = state.offsets.values.copy()
        before_grid = state.grid.values.values.copy()
        before_op = [p.values.copy() for p in state.params.opacity.parameters()]
        before_feat = [p.values.copy() for p in state.params.feature_parameters()]
        trainer.finetune(state, toy_dataset)
        assert np.array_equal(state.offsets.values, before_off)
        assert np.array_equal(state.grid.values.values, before_grid)
        for a, b in zip(before_op, state.params.opacity.parameters()):
            assert np.array_equal(a, b.values)
        changed = any(
            not np.array_equal(a, b.values)
            for a, b in zip(before_feat, state.params.feature_parameters())
        )
        assert changed

    def test_deterministic_given_seed(self, toy_dataset):
        def run_once():
            state = trainer.new_state(tiny_run_config())
            trainer.train_stage1(state, toy_dataset)
            return state

        a, b = run_once(), run_once()
        assert np.array_equal(a.offsets.values, b.offsets.values)
        assert np.array_equal(a.grid.values.values, b.grid.values.values)
        for pa, pb in zip(a.params.parameters(), b.params.parameters()):
            assert np.array_equal(pa.values, pb.values)


class TestCheckpoint:
    def test_round_trip(self, toy_dataset, tmp_path):
        state = trainer.new_state(tiny_run_config())
        trainer.train_stage1(state, toy_dataset)
        path = str(tmp_path / "ck.npz")
        trainer.save_checkpoint(path, state)
        loaded = trainer.load_checkpoint(path)
        assert loaded.stage == state.stage
        assert loaded.run.hash() == state.run.hash()
        assert np.array_equal(loaded.offsets.values, state.offsets.values)
        for pa, pb in zip(loaded.params.parameters(), state.params.parameters()):
            assert np.array_equal(pa.values, pb.values)

    def test_version_check(self, tmp_path):
        state = trainer.new_state(tiny_run_config())
        path = str(tmp_path / "ck.npz")
        trainer.save_checkpoint(path, state)
        data = dict(np.load(path, allow_pickle=False))
        import json

        meta = json.loads(str(data["meta"]))
        meta["version"] = 999
        data["meta"] = json.dumps(meta)
        np.savez(path, **data)
        with pytest.raises(ValueError, match="version"):
            trainer.load_checkpoint(path)


class TestRenders:
    def test_renders_finite_and_shaped(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        trainer.train_stage1(state, toy_dataset)
        cam = toy_dataset.cameras[0]
        img1 = trainer.render_stage1(state, cam)
        assert img1.shape == (20, 20, 3)
        assert np.all(np.isfinite(img1))
        trainer.train_stage2(state, toy_dataset)
        img2 = trainer.render_binary(state, cam)
        assert img2.shape == (20, 20, 3)
        assert np.all(np.isfinite(img2))

    def test_binary_render_background_where_uncovered(self, toy_dataset):
        state = trainer.new_state(tiny_run_config())
        # opacity exactly zero everywhere -> all background
        state.params.opacity.head[0].values[:] = 0.0
        state.params.opacity.head[1].values[:] = -1000.0
        state.grid.values.values[:] = 1.0
        cam = toy_dataset.cameras[0]
        img = trainer.render_binary(state, cam, background=(0.25, 0.5, 0.75))
        np.testing.assert_allclose(img, np.broadcast_to([0.25, 0.5, 0.75], img.shape))
