from importlib import resources

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcqa.config import SCHEMA, ConfigError, RunConfig, default_config


class TestDefaults:
    @pytest.mark.parametrize("key,value", [
        ("train.lr", 3e-4), ("train.batch_size", 8), ("train.epochs", 30), ("projection.views", 6),
        ("projection.render_size", 256), ("projection.crop_size", 64), ("model.dim", 32),
        ("model.blocks", 2), ("model.heads", 4), ("model.patch_size", 8), ("model.context_tokens", 16),
        ("alignment.scale", 10.0), ("alignment.scale_mode", "learnable"), ("loss.tau1", 0.07),
        ("loss.beta", 0.08), ("loss.thetas", (0.25, 0.5, 0.75)), ("corpus.references", 8),
    ])
    def test_value(self, key, value):
        assert default_config()[key] == value

    def test_alpha_is_one_over_k(self):
        assert default_config().alpha == pytest.approx(0.2)
        assert default_config().updated(loss__alpha="0.5").alpha == 0.5

    def test_shipped_file_matches_defaults(self):
        text = resources.files("pcqa").joinpath("configs/default.cfg").read_text()
        assert RunConfig.from_text(text).canonical() == default_config().canonical()


class TestParsing:
    def test_round_trip(self):
        cfg = default_config().updated(train__epochs=3, model__text=False, loss__thetas="0.1,0.9")
        again = RunConfig.from_text(cfg.canonical())
        assert again.values == cfg.values
        assert again.hash() == cfg.hash()

    def test_comments_and_blank_lines(self):
        cfg = RunConfig.from_text("# header\n\ntrain.epochs = 4  # short run\n")
        assert cfg["train.epochs"] == 4

    @pytest.mark.parametrize("raw,value", [("true", True), ("Yes", True), ("off", False), ("0", False)])
    def test_booleans(self, raw, value):
        assert RunConfig.from_text(f"model.text = {raw}\n")["model.text"] is value

    @pytest.mark.parametrize("text", [
        "train.nope = 1\n", "train.epochs = three\n", "train.epochs\n", "model.text = maybe\n",
        "projection.backend = gpu\n", "model.context_tokens = 3\n", "alignment.q = 5,4,3\n",
        "model.color = false\nmodel.depth = false\n", "projection.crop_size = 300\n",
        "projection.crop_size = 60\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "absent.cfg")

    def test_auto_values(self):
        cfg = RunConfig.from_text("projection.splat_radius = 3\nloss.alpha = auto\n")
        assert cfg["projection.splat_radius"] == 3 and cfg["loss.alpha"] == "auto"


class TestHash:
    def test_any_change_changes_hash(self):
        base = default_config()
        assert base.updated(run__seed=1).hash() != base.hash()
        assert base.updated(loss__beta=0.0).hash() != base.hash()
        assert len(base.hash()) == 8

    @settings(max_examples=100)
    @given(st.permutations(sorted(SCHEMA)))
    def test_line_order_irrelevant(self, keys):
        cfg = default_config()
        lines = dict(line.split(" = ", 1) for line in cfg.canonical().splitlines())
        shuffled = "".join(f"{k} = {lines[k]}\n" for k in keys)
        assert RunConfig.from_text(shuffled).hash() == cfg.hash()


class TestMetadata:
    def test_every_value_echoed(self):
        meta = default_config().metadata()
        for line in default_config().canonical().splitlines():
            assert line in meta

    @pytest.mark.parametrize("key", ["alignment.scale_mode", "loss.tau1", "train.lr"])
    def test_deviation_listed(self, key):
        meta = default_config().metadata()
        deviations = meta.split("[deviations]", 1)[1]
        assert f"\n{key} = " in deviations

    def test_matching_setting_not_listed(self):
        cfg = default_config().updated(alignment__scale_mode="fixed", alignment__scale=1.0)
        deviations = cfg.metadata().split("[deviations]", 1)[1]
        assert "\nalignment.scale_mode = " not in deviations
        assert "\nalignment.scale = " not in deviations
