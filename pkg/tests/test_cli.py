import json

import numpy as np
import pytest

from cisrnet.cli import main
from cisrnet.config import RunConfig, build_extractor, desk_config, load_config, paper_config
from cisrnet.data import DatasetManifest, read_image, synthetic_image, write_png
from cisrnet.errors import ConfigError
from cisrnet.metrics import psnr_y, ssim_y
from cisrnet.data import upscale_baseline
from cisrnet.model import CisrModel
from cisrnet.trainer import load_checkpoint, save_checkpoint

TINY = [
    "model.channels=8",
    "model.reduction=4",
    "model.coarse_groups=1",
    "model.coarse_blocks=1",
    "model.fine_groups=1",
    "model.fine_blocks=1",
    "stage1.epochs=4",
    "stage1.decay_epoch=2",
    "stage2.epochs=2",
    "stage2.decay_epoch=1",
    "stage1.steps_per_epoch=3",
    "stage2.steps_per_epoch=3",
    "data.batch_size=2",
    "data.patch_size=12",
    "checkpoint_every=5",
]


def sets(extra=()):
    out = []
    for s in [*TINY, *extra]:
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    rng = np.random.default_rng(0)
    (root / "hr").mkdir()
    for i in range(3):
        write_png(root / "hr" / f"img{i}.png", synthetic_image(rng, 64, 72))
    assert main(["prepare", "--hr-dir", str(root / "hr"), "--out", str(root / "set"), "--scale", "2", "--min-lr", "16"]) == 0
    return root


def manifest(dataset):
    return str(dataset / "set" / "manifest.json")


class TestConfig:
    def test_paper_profile_values(self):
        cfg = paper_config()
        assert cfg == RunConfig()
        assert (cfg.loss.lambda_l1, cfg.loss.lambda_p, cfg.loss.stage1_weight) == (1.0, 0.05, 0.1)
        assert (cfg.stage1.lr, cfg.stage1.decay_epoch, cfg.stage2.lr, cfg.stage2.decay_epoch) == (1e-4, 75, 0.75e-4, 150)

    def test_desk_profile(self):
        cfg = desk_config()
        m = cfg.model
        assert (m.channels, m.coarse_groups, m.coarse_blocks, m.fine_groups, m.fine_blocks) == (16, 1, 2, 1, 2)
        assert cfg.stage1.total_steps == 300 and cfg.stage2.total_steps == 600

    def test_roundtrip(self, tmp_path):
        cfg = desk_config().with_overrides(["seed=3", "model.fine_block_kind=PDAB", "stage2.loss=l1"])
        cfg.dump(tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg
        assert build_extractor(cfg) is None

    @pytest.mark.parametrize(
        "override",
        ["nope=1", "model.nope=1", "model.scale=5", "stage1.lr=-1", "dtype=float16", "extractor.kind=archive", "noequals"],
    )
    def test_bad_overrides(self, override):
        with pytest.raises(ConfigError):
            desk_config().with_overrides([override])

    def test_version_checked(self, tmp_path):
        d = RunConfig().to_dict()
        d["version"] = 7
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_relative_paths_resolved(self, tmp_path):
        d = RunConfig().to_dict()
        d["data"]["train_manifest"] = "sets/train.json"
        (tmp_path / "c.json").write_text(json.dumps(d))
        assert load_config(tmp_path / "c.json").data.train_manifest == str((tmp_path / "sets" / "train.json").resolve())

    def test_ablation_switches(self):
        cfg = desk_config().with_overrides(["model.refinement_enabled=false", "model.coarse_groups=2"])
        assert CisrModel(cfg.model).refine is None


class TestPrepare:
    def test_counts_and_manifest(self, dataset):
        m = DatasetManifest.read(manifest(dataset))
        assert len(m.pairs) == 3 and m.quality == 10 and m.scale == 2
        assert len(list((dataset / "set" / "lr").glob("*.jpg"))) == 3

    def test_idempotent(self, dataset, tmp_path):
        args = ["prepare", "--hr-dir", str(dataset / "hr"), "--scale", "2", "--min-lr", "16"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "a"), "--force"]) == 0
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (dataset / "set" / "manifest.json").read_bytes()
        for f in (dataset / "set" / "lr").iterdir():
            assert (tmp_path / "a" / "lr" / f.name).read_bytes() == f.read_bytes()

    def test_quality_propagates(self, dataset, tmp_path):
        args = ["prepare", "--hr-dir", str(dataset / "hr"), "--out", str(tmp_path), "--scale", "2", "--quality", "30", "--min-lr", "16"]
        assert main(args) == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["quality"] == 30

    def test_existing_without_force(self, dataset, tmp_path):
        args = ["prepare", "--hr-dir", str(dataset / "hr"), "--out", str(tmp_path), "--scale", "2", "--min-lr", "16"]
        assert main(args) == 0
        assert main(args) == 3


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = main(["train", "--out", str(out), "--train-manifest", manifest(dataset), "--stage", "all", *sets()])
    assert rc == 0
    return out


class TestTrain:
    def test_outputs(self, trained):
        for name in ("config.json", "train.jsonl", "stage1-final.npz", "stage2-final.npz"):
            assert (trained / name).exists()
        recs = [json.loads(x) for x in (trained / "train.jsonl").read_text().splitlines()]
        assert [(r["stage"], r["step"]) for r in recs] == [(1, i) for i in range(1, 13)] + [(2, i) for i in range(1, 7)]

    def test_config_echo(self, trained, dataset):
        cfg = load_config(trained / "config.json")
        assert cfg.model.channels == 8 and cfg.data.train_manifest == str((dataset / "set" / "manifest.json").resolve())

    def test_stage1_only(self, dataset, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--train-manifest", manifest(dataset), "--stage", "1", *sets()]) == 0
        assert (tmp_path / "stage1-final.npz").exists() and not (tmp_path / "stage2-final.npz").exists()

    def test_all_equals_one_then_two(self, trained, dataset, tmp_path):
        base = ["train", "--out", str(tmp_path), "--train-manifest", manifest(dataset), *sets()]
        assert main(base + ["--stage", "1"]) == 0
        assert main(base + ["--stage", "2"]) == 0
        assert (tmp_path / "train.jsonl").read_text() == (trained / "train.jsonl").read_text()
        assert (tmp_path / "stage2-final.npz").read_bytes() == (trained / "stage2-final.npz").read_bytes()

    def test_resume_without_gaps(self, trained, dataset, tmp_path):
        base = ["train", "--out", str(tmp_path), "--train-manifest", manifest(dataset), *sets()]
        assert main(base + ["--stage", "1"]) == 0
        # stage1-last.npz was written at step 10; resume from it and finish both stages
        assert load_checkpoint(tmp_path / "stage1-last.npz")[1].step == 10
        assert main(base + ["--stage", "all", "--resume", str(tmp_path / "stage1-last.npz")]) == 0
        assert (tmp_path / "train.jsonl").read_text() == (trained / "train.jsonl").read_text()
        assert (tmp_path / "stage2-final.npz").read_bytes() == (trained / "stage2-final.npz").read_bytes()

    def test_manifest_scale_mismatch(self, dataset, tmp_path):
        rc = main(["train", "--out", str(tmp_path), "--train-manifest", manifest(dataset), *sets(["model.scale=3"])])
        assert rc == 2

    def test_missing_manifest(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), *sets()]) == 2
        assert main(["train", "--out", str(tmp_path), "--train-manifest", str(tmp_path / "x.json"), *sets()]) == 3

    def test_numeric_abort_exit_code(self, trained, dataset, tmp_path):
        model, _, _ = load_checkpoint(trained / "stage1-final.npz")
        model.params["coarse.recon.bias"].data[:] = np.nan
        save_checkpoint(tmp_path / "bad.npz", model)
        args = ["train", "--out", str(tmp_path / "r"), "--train-manifest", manifest(dataset), "--init", str(tmp_path / "bad.npz")]
        assert main(args + sets()) == 4


class TestSr:
    def test_shape_and_determinism(self, trained, tmp_path):
        img = synthetic_image(np.random.default_rng(1), 48, 48)
        write_png(tmp_path / "in.png", img)
        ck = str(trained / "stage2-final.npz")
        for name in ("a.png", "b.png"):
            assert main(["sr", "--checkpoint", ck, "--input", str(tmp_path / "in.png"), "--output", str(tmp_path / name)]) == 0
        assert read_image(tmp_path / "a.png").shape == (96, 96, 3)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_emit_coarse_zero_refinement(self, trained, tmp_path):
        model, _, _ = load_checkpoint(trained / "stage2-final.npz")
        model.refine.zero_()
        save_checkpoint(tmp_path / "z.npz", model)
        write_png(tmp_path / "in.png", synthetic_image(np.random.default_rng(2), 30, 36))
        rc = main(["sr", "--checkpoint", str(tmp_path / "z.npz"), "--input", str(tmp_path / "in.png"), "--output", str(tmp_path / "o.png"), "--emit-coarse"])
        assert rc == 0
        assert np.array_equal(read_image(tmp_path / "o.png"), read_image(tmp_path / "o_coarse.png"))

    def test_directory_and_scale_check(self, trained, dataset, tmp_path):
        ck = str(trained / "stage2-final.npz")
        assert main(["sr", "--checkpoint", ck, "--input", str(dataset / "set" / "lr"), "--output", str(tmp_path / "o")]) == 0
        assert len(list((tmp_path / "o").glob("*.png"))) == 3
        assert main(["sr", "--checkpoint", ck, "--input", str(dataset / "set" / "lr"), "--output", str(tmp_path / "p"), "--scale", "3"]) == 2
        assert main(["sr", "--checkpoint", ck, "--input", str(tmp_path / "none.png"), "--output", str(tmp_path / "q.png")]) == 3


class TestEval:
    def test_baseline_only(self, dataset, tmp_path, capsys):
        assert main(["eval", "--manifest", manifest(dataset), "--out", str(tmp_path)]) == 0
        text = (tmp_path / "eval.txt").read_text()
        assert "shave=2" in text and "codec=pillow-libjpeg-baseline-420" in text
        m = DatasetManifest.read(manifest(dataset))
        pairs = m.load()
        rows = [line.split("\t") for line in text.splitlines() if line.startswith("img")]
        for row, p in zip(rows, pairs):
            up = upscale_baseline(p.lr, 2)
            assert float(row[1].split("=")[1]) == pytest.approx(psnr_y(up, p.hr, 2), abs=1e-4)
            assert float(row[2].split("=")[1]) == pytest.approx(ssim_y(up, p.hr, 2), abs=1e-4)
        assert "bicubic" in capsys.readouterr().out

    def test_model_and_baseline(self, trained, dataset, tmp_path):
        assert main(["eval", "--manifest", manifest(dataset), "--checkpoint", str(trained / "stage2-final.npz"), "--out", str(tmp_path)]) == 0
        csv_text = (tmp_path / "eval.csv").read_text()
        assert "model-fine," in csv_text and "bicubic," in csv_text

    def test_nothing_to_do(self, dataset):
        assert main(["eval", "--manifest", manifest(dataset), "--baseline", "none"]) == 2
