import json
import os

import numpy as np
import pytest

from meshfield import baker, cli, trainer
from meshfield.config import ConfigError, RunConfig, StageConfig, config_from_dict


def write_config(path, **overrides):
    cfg = {
        "resolution": 5,
        "model_width": 16,
        "encoding_degree": 2,
        "seed": 7,
        "toy_train_views": 3,
        "toy_test_views": 2,
        "toy_image_size": 16,
        "stage1": {"steps": 10, "batch_pixels": 16},
        "stage2": {"steps": 6, "batch_pixels": 6},
        "finetune": {"steps": 4, "batch_pixels": 6},
    }
    cfg.update(overrides)
    with open(path, "w") as f:
        json.dump(cfg, f)
    return cfg


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys.*typo_key"):
            config_from_dict({"typo_key": 1})

    def test_nested_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="stage1"):
            config_from_dict({"stage1": {"nope": 2}})

    def test_hash_stable_and_sensitive(self):
        a = RunConfig()
        b = RunConfig()
        assert a.hash() == b.hash()
        b.seed = 99
        assert a.hash() != b.hash()

    def test_round_trip(self):
        run = RunConfig(seed=5, stage1=StageConfig(steps=3))
        again = config_from_dict(run.to_dict())
        assert again == run


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """End-to-end CLI run on a micro config, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = str(root / "run.json")
    write_config(cfg_path)
    out = str(root / "out")
    rc = cli.main(["train", "--config", cfg_path, "--scene", "toy:single", "--out", out])
    assert rc == 0
    rc = cli.main(["bake", os.path.join(out, "checkpoint.npz"), "--out", str(root / "asset")])
    assert rc == 0
    return root


class TestCommands:
    def test_train_produces_checkpoint_and_log(self, pipeline_dir):
        out = pipeline_dir / "out"
        assert (out / "checkpoint.npz").exists()
        assert (out / "metrics.csv").exists()
        state = trainer.load_checkpoint(str(out / "checkpoint.npz"))
        assert state.stage == trainer.FINETUNE

    def test_validate_clean_asset(self, pipeline_dir, capsys):
        rc = cli.main(["validate", str(pipeline_dir / "asset")])
        assert rc == 0
        assert "asset ok" in capsys.readouterr().out

    def test_validate_detects_corruption(self, tmp_path):
        from test_baker import front_camera, rigged_state
        from PIL import Image

        asset = baker.bake(rigged_state(), [front_camera()])
        bad = tmp_path / "asset_bad"
        baker.export_asset(asset, str(bad))
        p = bad / "feat0_0.png"
        img = np.asarray(Image.open(p)).copy()
        ys, xs = np.nonzero(img[..., 0])
        assert len(ys) > 0
        img[ys[0], xs[0], 0] = 0
        Image.fromarray(img).save(p)
        rc = cli.main(["validate", str(bad)])
        assert rc == cli.EXIT_INVARIANT

    def test_render_writes_frames(self, pipeline_dir, tmp_path):
        rc = cli.main(
            ["render", str(pipeline_dir / "asset"), "--out", str(tmp_path / "frames"),
             "--frames", "2", "--size", "16"]
        )
        assert rc == 0
        assert (tmp_path / "frames" / "frame_0000.png").exists()
        assert (tmp_path / "frames" / "frame_0001.png").exists()

    def test_eval_checkpoint_writes_csv(self, pipeline_dir, tmp_path):
        out_csv = str(tmp_path / "eval.csv")
        rc = cli.main(
            ["eval", "--checkpoint", str(pipeline_dir / "out" / "checkpoint.npz"),
             "--split", "test", "--out", out_csv]
        )
        assert rc == 0
        rows = open(out_csv).read().splitlines()
        assert rows[0] == "image,psnr"
        assert rows[-1].startswith("mean,")

    def test_eval_asset_writes_csv(self, pipeline_dir, tmp_path):
        out_csv = str(tmp_path / "eval_asset.csv")
        rc = cli.main(
            ["eval", "--asset", str(pipeline_dir / "asset"),
             "--dataset", str(pipeline_dir / "out" / "dataset"),
             "--split", "test", "--out", out_csv]
        )
        assert rc == 0
        assert os.path.exists(out_csv)

    def test_bench_writes_csv(self, pipeline_dir, tmp_path):
        out_csv = str(tmp_path / "bench.csv")
        rc = cli.main(
            ["bench", str(pipeline_dir / "asset"), "--frames", "2", "--size", "16",
             "--out", out_csv]
        )
        assert rc == 0
        assert len(open(out_csv).read().splitlines()) == 3  # header + 2 frames

    def test_missing_asset_io_error(self, tmp_path):
        rc = cli.main(["validate", str(tmp_path / "nope")])
        assert rc == cli.EXIT_IO

    def test_bad_config_usage_error(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"bogus": True}))
        rc = cli.main(["train", "--config", str(p), "--scene", "toy:single", "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_USAGE

    def test_unknown_toy_scene(self, tmp_path):
        cfg = tmp_path / "run.json"
        write_config(str(cfg))
        rc = cli.main(["train", "--config", str(cfg), "--scene", "toy:nothere", "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_IO

    def test_staged_training_resumes_identically(self, pipeline_dir, tmp_path):
        # running 1 then 2+finetune via separate invocations matches the
        # single all-stages run bit for bit
        cfg_path = str(tmp_path / "run.json")
        write_config(cfg_path)
        out = str(tmp_path / "staged")
        assert cli.main(["train", "--config", cfg_path, "--scene", "toy:single", "--out", out, "--stage", "1"]) == 0
        assert cli.main(["train", "--config", cfg_path, "--scene", "toy:single", "--out", out, "--stage", "2"]) == 0
        assert cli.main(["train", "--config", cfg_path, "--scene", "toy:single", "--out", out, "--stage", "finetune"]) == 0
        staged = trainer.load_checkpoint(os.path.join(out, "checkpoint.npz"))
        joint = trainer.load_checkpoint(str(pipeline_dir / "out" / "checkpoint.npz"))
        # same config & seed (dataset paths differ but content identical)
        assert np.array_equal(staged.offsets.values, joint.offsets.values)
        for a, b in zip(staged.params.parameters(), joint.params.parameters()):
            assert np.array_equal(a.values, b.values), a.name
