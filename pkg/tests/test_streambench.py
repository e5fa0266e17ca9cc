from dataclasses import replace

import numpy as np
import pytest

from src import streambench
from src.anchorforge import AnchorSource, DpgdConfig, anchor_statistics, build_anchor_set, load_anchor_set
from src.duotower import DualTowerModel, clip_logits, load_model, save_model
from src.errors import ConfigError, ExemplarAccessError, StageFailure
from src.protopath import PrototypeBank, dual_path_predict
from src.report import emit_report, metrics_document
from src.segp_train import TrainConfig
from src.streambench import (ABLATION_GRID, PRETRAIN_CLASS_OFFSET, TRAIN_PRESETS, ExperimentSettings, MethodFlags,
                             RunOptions, StageView, StreamSpec, bench_train_config, generate_stream,
                             pretrain_towers, pretrained_model, run_ablation, run_directory_names,
                             run_experiment, run_sweep, sweep_k_adv)


def _small_spec(**overrides):
    values = dict(num_tasks=3, classes_per_task=2, train_per_class=4, test_per_class=2, input_dim=16,
                  pretrain_classes=2, pretrain_per_class=3, seed=1)
    values.update(overrides)
    return StreamSpec(**values)


def _mean_max_cosine_to_earlier(stream):
    cosines = []
    for task in stream.tasks[1:]:
        earlier = [stream.directions[c] for c in stream.classes_through(task.task - 1)]
        for c in task.classes:
            cosines.append(max(float(stream.directions[c] @ d) for d in earlier))
    return np.mean(cosines)


class TestStream:
    def test_task_classes_are_disjoint_and_consecutive(self):
        spec = _small_spec()
        assert [spec.task_classes(t) for t in range(3)] == [[0, 1], [2, 3], [4, 5]]

    def test_rejects_overlap_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            StreamSpec(overlap=1.5)

    def test_shapes_and_ranges(self):
        stream = generate_stream(_small_spec())
        for task in stream.tasks:
            assert task.train.x.shape == (8, 16)
            assert task.test.x.shape == (4, 16)
            assert set(task.train.y) == set(task.classes)
            assert task.train.x.min() >= 0.0 and task.train.x.max() <= 1.0
        assert set(stream.pretrain.y) == {PRETRAIN_CLASS_OFFSET, PRETRAIN_CLASS_OFFSET + 1}
        for c, d in stream.directions.items():
            assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-12)

    def test_same_seed_same_stream(self):
        a, b = generate_stream(_small_spec()), generate_stream(_small_spec())
        for ta, tb in zip(a.tasks, b.tasks):
            np.testing.assert_array_equal(ta.train.x, tb.train.x)
            np.testing.assert_array_equal(ta.test.x, tb.test.x)
        np.testing.assert_array_equal(a.pretrain.x, b.pretrain.x)

    def test_different_seed_different_stream(self):
        a, b = generate_stream(_small_spec(seed=1)), generate_stream(_small_spec(seed=2))
        assert not np.array_equal(a.tasks[0].train.x, b.tasks[0].train.x)

    def test_overlap_pulls_new_classes_toward_old_ones(self):
        close = np.mean([_mean_max_cosine_to_earlier(generate_stream(_small_spec(overlap=0.8, seed=s)))
                         for s in range(10)])
        apart = np.mean([_mean_max_cosine_to_earlier(generate_stream(_small_spec(overlap=0.0, seed=s)))
                         for s in range(10)])
        assert close > apart

    def test_classes_through(self):
        stream = generate_stream(_small_spec())
        assert stream.classes_through(1) == [0, 1, 2, 3]


class TestStageView:
    def test_current_and_old_classes(self):
        view = generate_stream(_small_spec()).stage_view(2)
        assert view.current_classes == [4, 5]
        assert view.old_classes == [0, 1, 2, 3]

    def test_train_defaults_to_current_task(self):
        stream = generate_stream(_small_spec())
        view = stream.stage_view(1)
        assert view.train() is stream.tasks[1].train
        assert view.train_accesses == [1]

    def test_past_train_split_is_refused(self):
        view = generate_stream(_small_spec()).stage_view(2)
        with pytest.raises(ExemplarAccessError):
            view.train(0)
        assert view.train_accesses == [0]

    def test_future_test_split_is_refused(self):
        view = generate_stream(_small_spec()).stage_view(0)
        with pytest.raises(ExemplarAccessError):
            view.test(1)

    def test_past_test_splits_are_allowed(self):
        view = generate_stream(_small_spec()).stage_view(2)
        for task in range(3):
            view.test(task)
        assert view.test_accesses == [0, 1, 2]


class TestSettings:
    def test_flag_labels(self):
        assert MethodFlags().label == "ACGD+TSGR+PT+V"
        assert MethodFlags(False, False, False, False).label == "baseline"
        assert MethodFlags(acgd=True, tsgr=False, prototype_transfer=False,
                           visual_branch=False, anchor_source="seed").label == "ACGD[seed]"

    def test_unknown_anchor_source(self):
        with pytest.raises(ConfigError):
            MethodFlags(anchor_source="random")

    def test_ablation_grid_rows(self):
        assert [flags.label for flags in ABLATION_GRID] == [
            "baseline", "ACGD", "ACGD+TSGR", "ACGD+TSGR+PT", "ACGD+TSGR+PT+V"]

    def test_config_hash_ignores_output_location(self):
        a = ExperimentSettings(run=RunOptions(output_dir="a", label="x"))
        b = ExperimentSettings(run=RunOptions(output_dir="b", label="y", verbose=True))
        assert a.config_hash() == b.config_hash()

    def test_config_hash_follows_seed_and_flags(self):
        base = ExperimentSettings()
        assert base.config_hash() != ExperimentSettings(run=RunOptions(seed=1)).config_hash()
        assert base.config_hash() != ExperimentSettings(flags=MethodFlags(acgd=False)).config_hash()

    def test_model_must_match_stream_dimension(self, tiny_settings):
        settings = tiny_settings()
        settings = replace(settings, stream=replace(settings.stream, input_dim=9))
        with pytest.raises(ConfigError):
            pretrained_model(settings)

    def test_bench_preset(self):
        assert bench_train_config() == TrainConfig(**TRAIN_PRESETS["bench"])
        assert bench_train_config().learning_rate == 0.05
        assert bench_train_config(epochs=2).epochs == 2
        assert TRAIN_PRESETS["paper"] == {}

    def test_config_hash_follows_pretrained_path(self):
        assert ExperimentSettings().config_hash() != \
            ExperimentSettings(run=RunOptions(pretrained_path="towers.json")).config_hash()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            RunOptions(preset="fast")


class TestPretrainedTowers:
    def _with_path(self, settings, path):
        return replace(settings, run=replace(settings.run, pretrained_path=str(path)))

    def test_saved_towers_are_loaded(self, tmp_path, tiny_settings):
        settings = tiny_settings()
        saved = DualTowerModel.initialize(settings.model, seed=99)
        path = save_model(saved, tmp_path / "towers.json")
        loaded = pretrained_model(self._with_path(settings, path))
        for name, weights in saved.weights.items():
            np.testing.assert_array_equal(loaded.weights[name], weights)
        assert not np.array_equal(pretrain_towers(settings).weights["visual.W1"], saved.weights["visual.W1"])

    def test_input_dimension_must_match_stream(self, tmp_path, tiny_settings):
        settings = tiny_settings()
        path = save_model(DualTowerModel.initialize(replace(settings.model, input_dim=5)), tmp_path / "towers.json")
        with pytest.raises(ConfigError):
            pretrained_model(self._with_path(settings, path))

    def test_missing_file(self, tmp_path, tiny_settings):
        with pytest.raises(FileNotFoundError):
            pretrained_model(self._with_path(tiny_settings(), tmp_path / "none.json"))

    def test_run_from_saved_towers_matches_in_memory_run(self, tmp_path, tiny_settings):
        settings = tiny_settings()
        towers = pretrain_towers(settings)
        path = save_model(towers, tmp_path / "towers.json")
        from_file = run_experiment(self._with_path(settings, path))
        in_memory = run_experiment(settings, pretrained=towers)
        np.testing.assert_array_equal(from_file.accuracy.values, in_memory.accuracy.values)
        np.testing.assert_array_equal(from_file.accuracy.union, in_memory.accuracy.union)


class TestRunExperiment:
    @pytest.fixture
    def full_record(self, tiny_settings):
        return run_experiment(tiny_settings())

    def test_every_stage_is_evaluated(self, full_record):
        R = full_record.accuracy
        assert full_record.stages_completed == 3
        assert full_record.failed_stage is None
        for i in range(3):
            for j in range(i + 1):
                assert 0.0 <= R[i, j] <= 1.0
            assert 0.0 <= R.union[i] <= 1.0
            assert 0.0 <= R.clip_global[i] <= 1.0

    def test_pre_evaluations_fill_the_superdiagonal(self, full_record):
        R = full_record.accuracy
        assert not np.isnan(R[0, 1]) and not np.isnan(R[1, 2])
        assert np.isnan(R[0, 2])
        assert full_record.metrics["fwt"] is not None

    def test_metrics_are_defined(self, full_record):
        for key in ("avg", "last", "bwt", "fwt", "forgetting"):
            assert full_record.metrics[key] is not None
        assert full_record.metrics["last"] == full_record.accuracy.union[2]
        assert full_record.metrics["forgetting"] >= 0.0

    def test_anchors_cover_old_classes(self, full_record):
        assert sorted(full_record.anchor_stats) == [1, 2]
        assert full_record.anchor_stats[1].count == 2 * 2
        assert full_record.anchor_stats[2].count == 2 * 4
        assert len(full_record.trajectories[1]) == 3 + 1

    def test_losses_and_drift_per_stage(self, full_record):
        assert sorted(full_record.loss_histories) == [0, 1, 2]
        # 12 samples per class, 2 classes, batch 8, 2 epochs
        assert all(len(h) == 3 * 2 for h in full_record.loss_histories.values())
        assert full_record.loss_histories[0][0].loss_acgd == 0.0
        assert sorted(full_record.drift) == [1, 2]
        records, summary = full_record.drift[2]
        assert len(records) == 4 * 6
        assert summary.boundary_count + summary.core_count == 24

    def test_bank_and_predictions(self, full_record):
        assert full_record.bank.classes == [0, 1, 2, 3, 4, 5]
        assert full_record.bank.task_version == 2
        assert len(full_record.predictions) == 3 * 2 * 6
        assert all(len(p.fused_logits) == 6 for p in full_record.predictions)

    def test_visual_only_accuracy_per_stage(self, full_record):
        R = full_record.accuracy
        for i in range(3):
            assert 0.0 <= R.visual_global[i] <= 1.0
            for j in range(i + 1):
                assert 0.0 <= R.visual_per_task[i, j] <= 1.0
            assert np.all(np.isnan(R.visual_per_task[i, i + 1:]))
        assert metrics_document(full_record)["visual_global"] == [round(float(v), 6) for v in R.visual_global]

    def test_no_snapshots_without_a_directory(self, full_record):
        assert full_record.artifacts == {}

    def test_stage_snapshots(self, tmp_path, tiny_settings):
        settings = tiny_settings()
        record = run_experiment(settings, artifact_dir=tmp_path)
        for stage in range(3):
            for kind in ("anchors", "bank", "model"):
                path = tmp_path / f"{kind}_stage{stage}.json"
                assert record.artifacts[f"{kind}_stage{stage}"] == str(path)
                assert path.exists()
        assert len(load_anchor_set(tmp_path / "anchors_stage0.json")) == 0
        assert len(load_anchor_set(tmp_path / "anchors_stage2.json")) == 2 * 4
        assert PrototypeBank.load(tmp_path / "bank_stage1.json").classes == [0, 1, 2, 3]

        bank = PrototypeBank.load(tmp_path / "bank_stage2.json")
        assert bank.classes == record.bank.classes
        model = load_model(tmp_path / "model_stage2.json")
        stream = generate_stream(settings.stream)
        x = np.concatenate([task.test.x for task in stream.tasks])
        fused, _ = dual_path_predict(model, bank, x, stream.classes_through(2), settings.inference.beta)
        np.testing.assert_allclose(fused, np.stack([p.fused_logits for p in record.predictions]), atol=1e-12)

    def test_report_keeps_stage_snapshots(self, tmp_path, tiny_settings):
        [name] = run_directory_names(["segp"])
        record = run_experiment(tiny_settings(), label="segp", artifact_dir=tmp_path / name)
        emit_report([record], tmp_path)
        assert record.artifacts["model_stage2"].endswith("model_stage2.json")
        assert record.artifacts["metrics"] == str(tmp_path / "segp" / "metrics.json")

    def test_baseline_builds_no_anchors(self, tiny_settings):
        record = run_experiment(tiny_settings(acgd=False, tsgr=False, prototype_transfer=False,
                                              visual_branch=False))
        assert record.anchor_stats == {}
        assert record.transfer_fallbacks == {}
        assert all(r.loss_acgd == 0.0 and r.loss_tsgr == 0.0
                   for history in record.loss_histories.values() for r in history)
        np.testing.assert_array_equal(record.accuracy.union, record.accuracy.clip_global)

    def test_same_settings_same_record(self, tiny_settings):
        a, b = run_experiment(tiny_settings()), run_experiment(tiny_settings())
        np.testing.assert_array_equal(a.accuracy.values, b.accuracy.values)
        assert metrics_document(a) == metrics_document(b)

    def test_only_the_current_train_split_is_read(self, monkeypatch, tiny_settings):
        reads = []
        original = StageView.train

        def recording(self, task=None):
            split = original(self, task)
            reads.append((self.stage, self.train_accesses[-1]))
            return split

        monkeypatch.setattr(StageView, "train", recording)
        run_experiment(tiny_settings())
        assert reads == [(0, 0), (1, 1), (2, 2)]

    def test_failure_carries_partial_record(self, monkeypatch, tiny_settings):
        original = streambench.train_task

        def failing(model, x, labels, new_classes, config, **kwargs):
            if kwargs.get("task") == 1:
                raise RuntimeError("boom")
            return original(model, x, labels, new_classes, config, **kwargs)

        monkeypatch.setattr(streambench, "train_task", failing)
        with pytest.raises(StageFailure) as info:
            run_experiment(tiny_settings())
        assert info.value.stage == 1
        partial = info.value.partial_record
        assert partial.failed_stage == 1
        assert partial.stages_completed == 1
        assert sorted(partial.loss_histories) == [0]


class TestGrids:
    def test_ablation_runs_every_row(self, tiny_settings):
        records = run_ablation(tiny_settings())
        assert [r.label for r in records] == [flags.label for flags in ABLATION_GRID]
        assert len({r.config_hash for r in records}) == 5
        assert all(r.stages_completed == 3 for r in records)

    def test_sweep_labels(self, tiny_settings):
        records = run_sweep("tau_a", [1.0, 20.0], tiny_settings())
        assert [r.label for r in records] == ["tau_a=1.0", "tau_a=20.0"]

    def test_unknown_sweep_axis(self, tiny_settings):
        with pytest.raises(ConfigError):
            run_sweep("momentum", [0.9], tiny_settings())

    def test_grid_snapshots_follow_report_directories(self, tmp_path, tiny_settings):
        records = run_sweep("tau_a", [1.0, 1.0], tiny_settings(), output_dir=tmp_path)
        assert (tmp_path / "tau_a=1.0" / "model_stage2.json").exists()
        assert (tmp_path / "tau_a=1.0-2" / "model_stage2.json").exists()
        emit_report(records, tmp_path)
        assert sorted(p.name for p in (tmp_path / "tau_a=1.0-2").glob("*_stage2.json")) == [
            "anchors_stage2.json", "bank_stage2.json", "model_stage2.json"]
        assert (tmp_path / "tau_a=1.0-2" / "metrics.json").exists()

    def test_directory_names(self):
        assert run_directory_names(["a b", "x", "x", "x"]) == ["a_b", "x", "x-2", "x-3"]

    @pytest.mark.slow
    def test_parallel_grid_matches_serial(self, tiny_settings):
        serial = run_ablation(tiny_settings())
        parallel_settings = tiny_settings()
        parallel = run_ablation(replace(parallel_settings, run=replace(parallel_settings.run, workers=2)))
        assert [metrics_document(r) for r in serial] == [metrics_document(r) for r in parallel]

    @pytest.mark.slow
    def test_k_adv_sweep(self, tiny_settings):
        records = sweep_k_adv(tiny_settings(), values=(0, 2))
        assert [r.label for r in records] == ["k_adv=0", "k_adv=2"]
        assert len(records[0].trajectories[1]) == 1
        assert len(records[1].trajectories[1]) == 3


@pytest.mark.slow
def test_more_dpgd_steps_raise_target_probability(toy_teacher):
    teacher, stream, bank = toy_teacher
    train = stream.tasks[1].train
    old = list(stream.tasks[0].classes)
    probabilities = []
    for iterations in (0, 5, 10):
        config = DpgdConfig(iterations=iterations)
        anchors = build_anchor_set(teacher, train.x, train.y, old, bank, config, source=AnchorSource.ADVERSARIAL)
        probabilities.append(anchor_statistics(teacher, anchors, old, config.temperature).anchor_target_probability)
    assert probabilities[0] <= probabilities[1] <= probabilities[2]


TREND_SEEDS = range(5)


@pytest.fixture(scope="module")
def trend_records():
    """CE-only and ACGD-only runs on the default stream under the bench preset, one pair per seed."""
    variants = {"ce": MethodFlags(False, False, False, False), "acgd": MethodFlags(True, False, False, False)}
    records = {name: [] for name in variants}
    for seed in TREND_SEEDS:
        settings = ExperimentSettings(train=bench_train_config(), run=RunOptions(seed=seed))
        stream = generate_stream(settings.stream)
        towers = pretrain_towers(settings, stream)
        for name, flags in variants.items():
            records[name].append(run_experiment(replace(settings, flags=flags), stream=stream, pretrained=towers))
    return records


def _mean_drift(records, attribute):
    return float(np.mean([getattr(summary, attribute) for record in records
                          for _, summary in record.drift.values()]))


@pytest.mark.slow
class TestTrends:
    def test_ce_only_forgets(self, trend_records):
        assert np.mean([r.metrics["forgetting"] for r in trend_records["ce"]]) > 0.0

    def test_acgd_cuts_forgetting(self, trend_records):
        ce = np.mean([r.metrics["forgetting"] for r in trend_records["ce"]])
        acgd = np.mean([r.metrics["forgetting"] for r in trend_records["acgd"]])
        assert acgd <= 0.7 * ce

    def test_boundary_samples_drift_more_than_core_samples(self, trend_records):
        ce = trend_records["ce"]
        assert _mean_drift(ce, "boundary_mean") > _mean_drift(ce, "core_mean")

    def test_acgd_lowers_boundary_drift(self, trend_records):
        assert _mean_drift(trend_records["acgd"], "boundary_mean") < _mean_drift(trend_records["ce"], "boundary_mean")
