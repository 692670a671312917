import json
import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import app
import modules.selftrain as selftrain
from modules import cli
from modules.network import init_params
from modules.pointcloud import IGNORE, PointCloud
from modules.synth import load_scene_set
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.config import DomainsConfig, save_config
from utils.errors import ConfigError, DataError
from utils.pcrv import read_label_map, read_range_image, write_cloud
from utils.render import decode_ppm


@pytest.fixture
def cfg(tiny_config):
    return tiny_config()


@pytest.fixture
def pretrained(cfg, tmp_path):
    return cli.cmd_pretrain(cfg, tmp_path / "pre")


class TestSynthGen:
    def test_deterministic(self, cfg, tmp_path):
        a = cli.cmd_synth_gen(cfg, tmp_path / "a")
        b = cli.cmd_synth_gen(cfg, tmp_path / "b")
        assert a == b
        assert a["source"]["count"] == 3
        assert (tmp_path / "a" / "provenance.json").exists()
        assert load_scene_set(tmp_path / "a" / "target").eval_only

    def test_zero_scenes(self, tiny_config, tmp_path):
        cfg = tiny_config(domains=DomainsConfig(scenes=0, extent=20.0))
        manifests = cli.cmd_synth_gen(cfg, tmp_path)
        assert manifests["source"]["files"] == [] and manifests["target"]["files"] == []

    def test_datasets_feed_later_commands(self, cfg, tmp_path):
        cli.cmd_synth_gen(cfg, tmp_path / "data")
        from_disk = replace(cfg, domains=replace(cfg.domains, source_dir=str(tmp_path / "data" / "source"),
                                                 target_dir=str(tmp_path / "data" / "target")))
        generated = cli.load_domains(cfg)
        loaded = cli.load_domains(from_disk)
        assert len(loaded[0]) == len(generated[0])
        assert cli._dataset_digest(from_disk) is not None
        with pytest.raises(ConfigError):
            cli.load_domains(replace(cfg, domains=replace(cfg.domains, source_dir="x")))


class TestProject:
    def test_writes_containers_and_renderings(self, cfg, tmp_path):
        path = tmp_path / "cloud.pcrv"
        write_cloud(path, PointCloud([[10.0, 0.0, 0.0, 0.5], [0.0, 8.0, -1.0, 0.2]], labels=[1, 3]))
        out = cli.cmd_project(cfg, path, tmp_path / "run")
        ri = read_range_image(out["range_image"])
        assert ri.channels.shape == (6, 8, 32)
        assert ri.mask.sum() == 2
        assert read_label_map(out["label_map"]).shape == (8, 32)
        assert decode_ppm(out["range_ppm"].read_bytes()).shape == (8 * cli.ROW_SCALE, 32, 3)

    def test_missing_cloud(self, cfg, tmp_path):
        with pytest.raises(DataError):
            cli.cmd_project(cfg, tmp_path / "none.pcrv", tmp_path)


class TestTraining:
    def test_pretrain_zero_epochs_is_initialization(self, tiny_config, tmp_path):
        cfg = tiny_config()
        cfg = replace(cfg, train=replace(cfg.train, pretrain_epochs=0))
        path = cli.cmd_pretrain(cfg, tmp_path)
        params, _ = load_checkpoint(path, expected_digest=cfg.digest())
        expected = init_params(cfg.model, cfg.seed)
        for key in expected:
            np.testing.assert_array_equal(params[key], expected[key])
        assert not (tmp_path / "pretrain.csv").exists()

    def test_pretrain_logs(self, pretrained):
        log = pd.read_csv(pretrained.parent / "pretrain.csv")
        assert log["split"].tolist() == ["train"]
        assert "iou_vehicle" in log.columns
        prov = json.loads((pretrained.parent / "provenance.json").read_text())
        assert prov["seed"] == 3

    def test_selftrain_is_bit_identical(self, cfg, pretrained, tmp_path):
        first = cli.cmd_selftrain(cfg, pretrained, tmp_path / "a")
        second = cli.cmd_selftrain(cfg, pretrained, tmp_path / "b")
        for name in ("w_r1.cdnw", "w_r2.cdnw", "selftrain.csv", "reports.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert [r["round"] for r in first["reports"]] == [1, 2]
        assert first["checkpoint"].name == "w_r2.cdnw"
        assert second["reports"] == first["reports"]
        assert (tmp_path / "a" / "pseudolabels" / "round1" / "pseudolabels.json").exists()
        assert (tmp_path / "a" / "selftrain.html").exists()

    def test_selftrain_rejects_foreign_checkpoint(self, cfg, tmp_path):
        path = tmp_path / "w.cdnw"
        save_checkpoint(path, init_params(cfg.model, 0), "not-this-config")
        with pytest.raises(ConfigError):
            cli.cmd_selftrain(cfg, path, tmp_path / "run")


class TestEval:
    def test_metrics_and_overlays(self, cfg, pretrained, tmp_path):
        run = tmp_path / "eval"
        out = cli.cmd_eval(cfg, pretrained, run, overlay=2)
        assert 0.0 <= out["metrics"]["miou"] <= 1.0
        assert out["metrics"]["scoring"] == "point"
        assert sorted(p.name for p in run.glob("overlay_*.ppm")) == ["overlay_00000.ppm", "overlay_00001.ppm"]
        source, target = cli.load_domains(cfg)
        for i, painted in enumerate(out["overlay_pixels"]):
            assert painted == int(cfg.sensor.project(target.clouds[i])[0].mask.sum())
        classes = pd.read_csv(run / "classes.csv")
        assert classes["class"].tolist() == ["ground", "vehicle", "pole", "wall", "vegetation"]

    def test_folded_scores_match(self, cfg, pretrained, tmp_path):
        plain = cli.cmd_eval(cfg, pretrained, tmp_path / "a", domain="source")
        folded = cli.cmd_eval(cfg, pretrained, tmp_path / "b", domain="source", fold=True)
        assert plain["metrics"]["miou"] == pytest.approx(folded["metrics"]["miou"])

    def test_config_mismatch(self, cfg, pretrained, tmp_path):
        other = replace(cfg, sensor=replace(cfg.sensor, max_range=30.0))
        with pytest.raises(ConfigError):
            cli.cmd_eval(other, pretrained, tmp_path)

    def test_pixel_scoring(self, cfg, pretrained, tmp_path):
        out = cli.cmd_eval(cfg, pretrained, tmp_path, per_point=False)
        assert out["metrics"]["scoring"] == "pixel"

    def test_unknown_domain(self, cfg, pretrained, tmp_path):
        with pytest.raises(ConfigError):
            cli.cmd_eval(cfg, pretrained, tmp_path, domain="moon")

    def test_ground_truth_predictor_scores_perfectly(self, cfg, pretrained, tmp_path, monkeypatch):
        _, target = cli.load_domains(cfg)
        eye = np.eye(cfg.model.num_classes)
        grids = [cfg.sensor.project(cloud)[1].grid for cloud in target.clouds]
        onehot = np.stack([eye[np.where(g == IGNORE, 0, g)].transpose(2, 0, 1) for g in grids])
        batches = iter([onehot])
        monkeypatch.setattr(selftrain, "predict", lambda *args, **kwargs: next(batches))
        row = cli.cmd_eval(cfg, pretrained, tmp_path, per_point=False)["metrics"]
        assert row["miou"] == 1.0
        assert row["fiou"] == pytest.approx(1.0)

    def test_constant_class_predictor(self, cfg, tmp_path):
        params = init_params(cfg.model, 0)
        for key in params:
            if key.endswith(".f_c"):
                params[key][:] = 0.0
        params["head.bias"][:] = [4.0, 0.0, 0.0, 0.0, 0.0]
        path = tmp_path / "ground.cdnw"
        save_checkpoint(path, params, cfg.digest())
        row = cli.cmd_eval(cfg, path, tmp_path / "run")["metrics"]
        assert row["iou_ground"] > 0
        for name in ("vehicle", "pole", "wall", "vegetation"):
            assert not row[f"iou_{name}"] > 0


class TestSweepAndAblate:
    def test_sweep_rows(self, cfg, pretrained, tmp_path):
        df = cli.cmd_sweep(cfg, "sigma", ["0", "1"], tmp_path, checkpoint=pretrained)
        assert df["value"].tolist() == [0.0, 1.0]
        assert (tmp_path / "sweep.csv").exists() and (tmp_path / "sweep.html").exists()

    def test_repeated_seed_gives_identical_table(self, cfg, pretrained, tmp_path):
        cli.cmd_sweep(cfg, "sigma", ["0", "1"], tmp_path / "a", checkpoint=pretrained)
        cli.cmd_sweep(cfg, "sigma", ["0", "1"], tmp_path / "b", checkpoint=pretrained)
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()

    def test_single_value_matches_selftrain(self, cfg, pretrained, tmp_path):
        df = cli.cmd_sweep(cfg, "k2", [str(cfg.pseudo.k[1])], tmp_path / "sweep", checkpoint=pretrained)
        trained = cli.cmd_selftrain(cfg, pretrained, tmp_path / "selftrain")
        row = cli.cmd_eval(cfg, trained["checkpoint"], tmp_path / "eval")["metrics"]
        assert len(df) == 1
        for col in [c for c in df.columns if c == "miou" or c.startswith("iou_")]:
            assert df[col].iloc[0] == pytest.approx(row[col], nan_ok=True), col

    def test_per_round_k_axes(self, cfg):
        k1, k2 = cfg.pseudo.k
        assert cli.with_axis(cfg, "k1", 0.1).pseudo.k == (0.1, k2)
        assert cli.with_axis(cfg, "k2", 0.9).pseudo.k == (k1, 0.9)
        assert cli.with_axis(cfg, "k", 0.4).pseudo.k == (0.4, 0.4)
        assert cli.parse_axis_values("k1", ["0.1", "0.2"]) == [0.1, 0.2]

    def test_template_axis(self, cfg, pretrained, tmp_path):
        df = cli.cmd_sweep(cfg, "template", ["whole-image", "bearing-2"], tmp_path, checkpoint=pretrained)
        assert len(df) == 2

    @pytest.mark.parametrize("axis,values", [("k", []), ("lr", ["0.1"]), ("k", ["half"]),
                                             ("template", ["spiral"])])
    def test_sweep_arguments(self, cfg, tmp_path, axis, values):
        with pytest.raises(ConfigError):
            cli.cmd_sweep(cfg, axis, values, tmp_path)

    def test_ablation_ladder(self, cfg, tmp_path):
        df = cli.cmd_ablate(cfg, tmp_path)
        assert df["rung"].tolist() == ["source-only", "baseline", "+regularizer", "+concat", "+entropy", "full"]
        assert df["miou"].between(0.0, 1.0).all()


class TestRenderingAndStats:
    def test_concat_demo(self, cfg, tmp_path):
        out = cli.cmd_concat_demo(cfg, tmp_path, count=2)
        assert len(out["files"]) == 4
        img = decode_ppm(out["files"][0].read_bytes())
        assert img.shape == ((5 * 8 + 4 * 2) * cli.ROW_SCALE, 32, 3)
        with pytest.raises(ConfigError):
            cli.cmd_concat_demo(cfg, tmp_path, count=0)

    def test_stats(self, cfg, tmp_path):
        df = cli.cmd_stats(cfg, tmp_path, domain="target", split=(2, 4))
        assert len(df) == 8
        assert list(df.columns[:4]) == ["domain", "row_band", "col_band", "empty_fraction"]
        assert df["empty_fraction"].between(0.0, 1.0).all()
        assert (tmp_path / "occupancy.html").exists()

    def test_stats_on_empty_domain(self, tiny_config, tmp_path):
        cfg = tiny_config(domains=DomainsConfig(scenes=0, extent=20.0))
        with pytest.raises(DataError):
            cli.cmd_stats(cfg, tmp_path)


class TestMain:
    def test_success(self, cfg, tmp_path):
        config = save_config(cfg, tmp_path / "cfg")
        code = app.main(["--config", str(config), "--out", str(tmp_path / "run"), "concat-demo", "--count", "1"])
        assert code == 0
        assert len(list((tmp_path / "run").glob("concat_*.ppm"))) == 2
        assert (tmp_path / "run" / "run.log").exists()

    def test_config_error_exit_code(self, tmp_path):
        assert app.main(["--config", str(tmp_path / "nope.json"), "--out", str(tmp_path), "stats"]) == 1

    def test_data_error_exit_code(self, cfg, tmp_path):
        config = save_config(cfg, tmp_path / "cfg")
        code = app.main(["--config", str(config), "--out", str(tmp_path / "run"), "eval",
                         str(tmp_path / "missing.cdnw")])
        assert code == 2

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            app.main(["teleport"])
        assert exc.value.code == 1

    @pytest.fixture
    def thread_env(self, monkeypatch):
        for var in app.THREAD_VARS + ("CONDA_DESK_THREADS",):
            monkeypatch.setenv(var, "0")
            monkeypatch.delenv(var)
        return monkeypatch

    @pytest.mark.parametrize("flags,env,expected", [([], None, 3), (["--threads", "2"], None, 2),
                                                    ([], "4", 4)])
    def test_thread_policy_reaches_process(self, cfg, tmp_path, thread_env, flags, env, expected):
        if env is not None:
            thread_env.setenv("CONDA_DESK_THREADS", env)
        config = save_config(replace(cfg, threads=3), tmp_path / "cfg")
        code = app.main(["--config", str(config), *flags, "--out", str(tmp_path / "run"), "synth-gen"])
        assert code == 0
        prov = json.loads((tmp_path / "run" / "provenance.json").read_text())
        assert prov["threads"] == expected
        for var in app.THREAD_VARS:
            assert os.environ[var] == str(expected)

    def test_seed_flag_reaches_run(self, cfg, tmp_path):
        config = save_config(cfg, tmp_path / "cfg")
        app.main(["--config", str(config), "--seed", "12", "--out", str(tmp_path / "run"), "synth-gen"])
        prov = json.loads((tmp_path / "run" / "provenance.json").read_text())
        assert prov["seed"] == 12
