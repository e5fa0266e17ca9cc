import json
from pathlib import Path

import pytest

import main
from src import streambench
from src.clmetrics import AccuracyMatrix
from src.config_loader import ConfigLoader, default_config, parse_override
from src.errors import ConfigError
from src.report import write_run
from src.segp_train import TrainConfig
from src.streambench import ExperimentSettings, MethodFlags, RunRecord, bench_train_config
from src.validator import ConfigValidator

DEFAULT_CONFIG = Path(__file__).parent.parent / "config" / "default.json"


def _write(path, data):
    path.write_text(json.dumps(data))
    return str(path)


class TestConfigLoader:
    def test_built_in_defaults(self):
        assert ConfigLoader().get_settings() == ExperimentSettings()

    def test_shipped_file_matches_defaults(self):
        assert ConfigLoader(str(DEFAULT_CONFIG)).as_dict() == default_config()

    def test_partial_file_keeps_other_defaults(self, tmp_path):
        loader = ConfigLoader(_write(tmp_path / "c.json", {"train": {"k": 5}, "flags": {"tsgr": False}}))
        assert loader.get_train_config().k == 5
        assert loader.get_train_config().tau_a == 20.0
        assert loader.get_method_flags().tsgr is False
        assert loader.get_method_flags().acgd is True

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ConfigLoader(str(tmp_path / "missing.json"))

    @pytest.mark.parametrize("data", [{"optimizer": {}}, {"train": 3}, {"train": {"momentum": 0.9}},
                                      {"train": {"k": 0}}, {"dpgd": {"epsilon": -1.0}},
                                      {"flags": {"acgd": "yes"}}, {"stream": {"overlap": 2.0}}])
    def test_invalid_file_contents(self, tmp_path, data):
        with pytest.raises(ConfigError):
            ConfigLoader(_write(tmp_path / "c.json", data))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            ConfigLoader(str(path))

    def test_top_level_must_be_object(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigLoader(_write(tmp_path / "c.json", [1, 2]))

    def test_overrides_apply_after_file(self, tmp_path):
        loader = ConfigLoader(_write(tmp_path / "c.json", {"dpgd": {"iterations": 5}}),
                              ["dpgd.iterations=20", "run.label=sweep one"])
        assert loader.get_dpgd_config().iterations == 20
        assert loader.get_run_options().label == "sweep one"

    def test_integer_accepted_for_float(self):
        loader = ConfigLoader(overrides=["train.tau_a=1"])
        assert loader.get_train_config().tau_a == 1.0
        assert isinstance(loader.get_train_config().tau_a, float)

    @pytest.mark.parametrize("override", ["flags.acgd=1", "train.k=2.5", "model.lora_rank=100",
                                          "run.workers=0", "run.preset=fast", "nosuch.key=1",
                                          "train.nosuch=1"])
    def test_invalid_overrides(self, override):
        with pytest.raises(ConfigError):
            ConfigLoader(overrides=[override])

    def test_bench_preset_fills_unset_train_keys(self):
        assert ConfigLoader(overrides=["run.preset=bench"]).get_train_config() == bench_train_config()
        assert ConfigLoader().get_train_config() == TrainConfig()

    def test_configured_train_keys_beat_the_preset(self, tmp_path):
        loader = ConfigLoader(_write(tmp_path / "c.json", {"run": {"preset": "bench"}, "train": {"epochs": 2}}),
                              ["train.learning_rate=0.01"])
        config = loader.get_train_config()
        assert (config.epochs, config.batch_size, config.learning_rate) == (2, 64, 0.01)
        assert loader.get_settings().train == config

    def test_explicit_keys(self, tmp_path):
        loader = ConfigLoader(_write(tmp_path / "c.json", {"train": {"k": 5}}), ["run.seed=3"])
        assert loader.is_explicit("train", "k")
        assert loader.is_explicit("run", "seed")
        assert not loader.is_explicit("run", "preset")

    def test_error_lists_every_problem(self, tmp_path):
        with pytest.raises(ConfigError) as info:
            ConfigLoader(_write(tmp_path / "c.json", {"train": {"k": 0, "epochs": 0}}))
        assert len(info.value.errors) == 2


class TestParseOverride:
    def test_json_values(self):
        assert parse_override("train.k=3") == ("train", "k", 3)
        assert parse_override("flags.acgd=false") == ("flags", "acgd", False)
        assert parse_override("run.output_dir=out/a") == ("run", "output_dir", "out/a")

    @pytest.mark.parametrize("text", ["train.k", "k=3", "=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)


def test_validate_file_reports_missing(tmp_path):
    assert ConfigValidator.validate_file(str(tmp_path / "none.json")) == {str(tmp_path / "none.json"):
                                                                          ["File not found"]}


class TestMain:
    @pytest.fixture
    def tiny_config_file(self, tmp_path, tiny_settings):
        return _write(tmp_path / "tiny.json", tiny_settings().as_dict())

    def test_missing_config_file(self, tmp_path):
        assert main.main(["run", "-c", str(tmp_path / "missing.json")]) == main.EXIT_CONFIG

    def test_bad_override(self):
        assert main.main(["run", "--set", "train.k=0"]) == main.EXIT_CONFIG

    def test_metrics_of_written_run(self, tmp_path, capsys):
        accuracy = AccuracyMatrix.from_values([[0.5, 0.25], [0.75, 1.0]], union=[0.5, 0.875])
        write_run(RunRecord(label="r", flags=MethodFlags(), config_hash="x", accuracy=accuracy), tmp_path)
        assert main.main(["metrics", str(tmp_path)]) == main.EXIT_OK
        out = capsys.readouterr().out
        assert "bwt: 0.2500" in out
        assert "fwt: 0.2500" in out

    def test_metrics_without_run(self, tmp_path):
        assert main.main(["metrics", str(tmp_path)]) == main.EXIT_CONFIG

    def test_run_writes_artifacts(self, tmp_path, tiny_config_file):
        out = tmp_path / "out"
        assert main.main(["run", "-c", tiny_config_file, "--output-dir", str(out), "--set", "run.label=tiny"]) \
            == main.EXIT_OK
        assert (out / "tiny" / "metrics.json").exists()
        assert (out / "summary.txt").exists()

    def test_pretrain_saves_model(self, tmp_path, tiny_config_file):
        assert main.main(["pretrain", "-c", tiny_config_file, "--output-dir", str(tmp_path)]) == main.EXIT_OK
        assert (tmp_path / "pretrained.json").exists()

    def test_stage_failure_is_a_runtime_error(self, monkeypatch, tmp_path, tiny_config_file):
        def failing(*args, **kwargs):
            raise RuntimeError("boom")

        monkeypatch.setattr(streambench, "train_task", failing)
        assert main.main(["run", "-c", tiny_config_file, "--output-dir", str(tmp_path)]) == main.EXIT_RUNTIME

    def test_run_writes_stage_snapshots(self, tmp_path, tiny_config_file):
        out = tmp_path / "out"
        assert main.main(["run", "-c", tiny_config_file, "--output-dir", str(out), "--set", "run.label=tiny"]) \
            == main.EXIT_OK
        for stage in range(3):
            for kind in ("anchors", "bank", "model"):
                assert (out / "tiny" / f"{kind}_stage{stage}.json").exists()

    def test_run_from_pretrained_file(self, monkeypatch, tmp_path, tiny_config_file):
        assert main.main(["pretrain", "-c", tiny_config_file, "--output-dir", str(tmp_path)]) == main.EXIT_OK
        loaded = []
        original = streambench.load_model

        def recording(path):
            loaded.append(str(path))
            return original(path)

        monkeypatch.setattr(streambench, "load_model", recording)
        pretrained = str(tmp_path / "pretrained.json")
        assert main.main(["run", "-c", tiny_config_file, "--output-dir", str(tmp_path / "out"),
                          "--pretrained", pretrained]) == main.EXIT_OK
        assert loaded == [pretrained]

    def test_missing_pretrained_file(self, tmp_path, tiny_config_file):
        assert main.main(["run", "-c", tiny_config_file, "--output-dir", str(tmp_path),
                          "--pretrained", str(tmp_path / "none.json")]) == main.EXIT_CONFIG


def _fake_record(settings):
    accuracy = AccuracyMatrix.from_values([[0.5]], union=[0.5])
    return RunRecord(label=settings.run.label, flags=settings.flags, config_hash="x", accuracy=accuracy)


class TestPresetRouting:
    @pytest.fixture
    def captured(self, monkeypatch):
        seen = []

        def experiment(settings, **kwargs):
            seen.append(settings)
            return _fake_record(settings)

        monkeypatch.setattr(main, "run_experiment", experiment)
        monkeypatch.setattr(main, "run_ablation", lambda settings, **kwargs: [experiment(settings)])
        monkeypatch.setattr(main, "run_sweep", lambda axis, values, settings, **kwargs: [experiment(settings)])
        monkeypatch.setattr(main, "pretrained_model", lambda settings, stream=None: None)
        return seen

    @pytest.mark.parametrize("command", [["ablate"], ["sweep-kadv"], ["sweep", "--axis", "k", "--values", "3"],
                                         ["drift-probe"]])
    def test_trend_commands_train_with_the_bench_preset(self, captured, tmp_path, command):
        assert main.main(command + ["--output-dir", str(tmp_path)]) == main.EXIT_OK
        assert captured
        assert all(settings.train == bench_train_config() for settings in captured)
        assert all(settings.run.preset == "bench" for settings in captured)

    def test_configured_preset_wins(self, captured, tmp_path):
        assert main.main(["ablate", "--output-dir", str(tmp_path), "--set", "run.preset=paper"]) == main.EXIT_OK
        assert captured[0].train == TrainConfig()

    def test_preset_flag(self, captured, tmp_path):
        assert main.main(["ablate", "--output-dir", str(tmp_path), "--preset", "paper"]) == main.EXIT_OK
        assert captured[0].train == TrainConfig()
        assert main.main(["run", "--output-dir", str(tmp_path), "--preset", "bench"]) == main.EXIT_OK
        assert captured[1].train == bench_train_config()

    def test_run_keeps_the_published_values(self, captured, tmp_path):
        assert main.main(["run", "--output-dir", str(tmp_path)]) == main.EXIT_OK
        assert captured[0].train == TrainConfig()
