import csv
import json

import numpy as np
import pytest
from PIL import Image

from mttgan import experiment as ex
from mttgan.cli import main
from mttgan.dataset import load_grayscale
from mttgan.gantrain import GanTrainConfig, generate_dataset
from mttgan.nets import ShapeError, discriminator_spec, generator_spec, init_weights, save_weights
from mttgan.stats import ConfusionMatrix, clopper_pearson


def bundle(spec, correct, total=136):
    wrong = total - correct
    cm = ConfusionMatrix(("covid", "normal"), np.array([[total // 2 - wrong, wrong], [0, total // 2]]))
    return ex.ReportBundle(spec, correct / total, clopper_pearson(correct, total), cm)


def test_standard_matrix_shape():
    specs = ex.standard_matrix()
    assert len(specs) == 24 and len({s.id for s in specs}) == 24
    cfg = ex.RunConfig()
    for s in specs:
        real, gen = s.counts(cfg)
        assert real + gen == 1400
        assert (real, gen) in ((0, 1400), (159, 1241))
    assert {s.gan_variant.value for s in specs} == {"baseline", "transfer", "mtt"}


def test_select_experiments():
    cfg = ex.RunConfig(experiments=["binary-vgg19-mtt-real"])
    assert [s.id for s in ex.select_experiments(cfg)] == ["binary-vgg19-mtt-real"]
    cfg = ex.RunConfig(experiments=["multiclass-alexnet"])
    assert len(ex.select_experiments(cfg)) == 6
    with pytest.raises(ex.ConfigError):
        ex.select_experiments(ex.RunConfig(experiments=["nope"]))


def test_config_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nprofile = desk\nseed = 5\n[gan]\nfinetune_epochs = 7\n[data]\npretrain_augmented = yes\n")
    cfg = ex.load_config(ini, env={"MTTGAN_OUTPUT_DIR": str(tmp_path / "envout")},
                         overrides={"finetune_epochs": 9, "seed": None})
    assert cfg.resolution == 32 and cfg.seed == 5 and cfg.finetune_epochs == 9
    assert cfg.pretrain_augmented is True
    assert cfg.output_dir == tmp_path / "envout"
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nbogus = 1\n")
    with pytest.raises(ex.ConfigError):
        ex.load_config(bad, env={})
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, "laptop", env={})
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, overrides={"resolution": 48}, env={})


def test_emit_table_format(tmp_path):
    specs = [s for s in ex.standard_matrix() if s.id.startswith("binary-vgg19")]
    bundles = [bundle(s, c) for s, c in zip(specs, (101, 125, 130, 135, 131, 135))]
    out = ex.emit_table(bundles, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 6
    assert rows[0]["accuracy_pct"] == "74.26"
    assert (rows[0]["ci_lower"], rows[0]["ci_upper"]) == ("0.66068", "0.81374")
    assert rows[0]["experiment"].startswith("Baseline (without augmentation)")
    structured = json.loads(out.with_suffix(".json").read_text())
    assert structured["task"] == "binary" and len(structured["rows"]) == 6
    with pytest.raises(ValueError):
        ex.emit_table([], tmp_path / "e.csv")
    multi = next(s for s in ex.standard_matrix() if s.task is ex.Task.MULTICLASS)
    with pytest.raises(ValueError):
        ex.emit_table(bundles + [bundle(multi, 200, 272)], tmp_path / "m.csv")


def test_fisher_pairings():
    specs = ex.standard_matrix()
    bundles = [bundle(s, 250, 272) if s.task is ex.Task.MULTICLASS else bundle(s, 120) for s in specs]
    ex.fisher_pairings(bundles)
    by_id = {b.spec.id: b for b in bundles}
    others = {o for o, _ in by_id["binary-vgg19-mtt-gen"].fisher_vs}
    assert others == {"binary-vgg19-baseline-aug-gen", "binary-vgg19-baseline-noaug-gen"}
    assert by_id["binary-alexnet-transfer-gen"].fisher_vs == []
    assert sum(len(b.fisher_vs) for b in bundles) == 16


def test_bundle_roundtrip():
    spec = ex.standard_matrix()[0]
    b = bundle(spec, 101)
    back = ex.ReportBundle.from_dict(json.loads(json.dumps(b.to_dict())))
    assert back.to_dict() == b.to_dict()


def test_render_grid(tmp_path):
    spec = generator_spec(32, filters=8)
    ckpt = save_weights(init_weights(spec, 0), tmp_path / "g.safetensors")
    one = ex.render_image_grid(ckpt, 1, 1, 3, tmp_path / "one.png")
    ref = generate_dataset(init_weights(spec, 0), 1, GanTrainConfig(resolution=32), seed=3, spec=spec)
    assert np.array_equal(load_grayscale(one), ref.records[0].pixels)
    grid = ex.render_image_grid(ckpt, 5, 5, 3, tmp_path / "grid.png")
    px = load_grayscale(grid)
    assert px.shape == (160, 160)
    tiles = {px[r * 32:(r + 1) * 32, c * 32:(c + 1) * 32].tobytes() for r in range(5) for c in range(5)}
    assert len(tiles) == 25
    again = ex.render_image_grid(ckpt, 5, 5, 3, tmp_path / "grid2.png")
    assert grid.read_bytes() == again.read_bytes()
    assert Image.open(grid).mode.startswith("I")
    d_ckpt = save_weights(init_weights(discriminator_spec(32, 4), 0), tmp_path / "d.safetensors")
    with pytest.raises(ShapeError):
        ex.render_image_grid(d_ckpt, 1, 1, 0, tmp_path / "bad.png")


def test_missing_prerequisites_are_actionable(tmp_path):
    cfg = ex.RunConfig(output_dir=tmp_path, resolution=32)
    with pytest.raises(ex.PrerequisiteError, match="prepare-data"):
        ex.prepare_data(cfg)
    with pytest.raises(ex.PrerequisiteError, match="kaggle_root"):
        ex.run_experiment(ex.standard_matrix()[0], cfg)


def test_run_matrix_keeps_partial_results(tmp_path, monkeypatch):
    specs = [s for s in ex.standard_matrix() if s.id.startswith("binary-vgg19")][:2]

    def fake(spec, cfg, train_missing=True):
        if spec is specs[1]:
            raise RuntimeError("boom")
        return bundle(spec, 100)

    monkeypatch.setattr(ex, "run_experiment", fake)
    cfg = ex.RunConfig(output_dir=tmp_path, resolution=32)
    out = ex.run_matrix(cfg, specs)
    assert [b.spec.id for b in out] == [specs[0].id]
    failures = json.loads((tmp_path / "reports" / "failures.json").read_text())
    assert failures == [{"experiment": specs[1].id, "error": "RuntimeError: boom"}]
    assert (tmp_path / "reports" / "table_binary.csv").exists()


def test_cli_list_and_errors(tmp_path, capsys):
    assert main(["list-experiments"]) == 0
    assert len(capsys.readouterr().out.split()) == 24
    assert main(["prepare-data", "--output-dir", str(tmp_path), "--profile", "desk"]) == 2
    assert "prepare-data" in capsys.readouterr().err


def test_prepare_data_stage(small_corpus, tmp_path):
    cfg = ex.RunConfig(output_dir=tmp_path / "out", resolution=32, holdout=4, covid_aug_factor=3,
                       kaggle_aug_factor=2, **{k: small_corpus[k] for k in ("kaggle_root", "covid_root",
                                                                            "covid_metadata")})
    data = ex.prepare_data(cfg)
    assert len(data.covid_test) == 4 and len(data.kaggle_test) == 12
    assert len(data.covid_gan_pool_aug) == 3 * len(data.covid_train)
    assert len(data.kaggle_gan_pool) == 2 * len(data.kaggle_train)
    assert data.test_set(ex.Task.BINARY).counts_by_label == {ex.Label.COVID: 4, ex.Label.NORMAL: 4}
    assert len(data.test_set(ex.Task.MULTICLASS)) == 16
    again = ex.prepare_data(cfg)
    assert [r.id for r in again.covid_gan_pool_aug] == [r.id for r in data.covid_gan_pool_aug]
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(again.kaggle_train, data.kaggle_train))
    changed = ex.RunConfig(**{**cfg.__dict__, "holdout": 5})
    with pytest.raises(ex.ConfigError):
        ex.prepare_data(changed)
