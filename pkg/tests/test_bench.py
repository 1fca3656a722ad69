"""Benchmark harness: sweep mechanics, report emission, reconstruction dumps."""

import math

import numpy as np
import pytest

from semivib import bench
from semivib.bench import (CellResult, DEFAULT_BUDGETS, ExperimentConfig,
                           ExperimentReport, ModelProfile, dump_reconstructions,
                           emit_report, emit_rounds, evaluate_accuracy,
                           load_any_model, profile_by_name, run_sweep, train_method)
from semivib.data import label_budget, make_synth_split, segments_matrix, znorm
from semivib.nn import EncoderSpec, TrainingDiverged
from semivib.rng import RngStream
from semivib.vae import TrainConfig, VaeModel, fit_vae

TINY_PROFILE = ModelProfile(name="tiny", input_dim=1024, latent_dim=8,
                            enc_filters=(4, 6), cls_filters=(4, 6), pca_k=8,
                            batch_size=64, epochs=2, lr=1e-3)


def tiny_config(methods=("pca",), budgets=(16,), rounds=1, seed=0):
    return ExperimentConfig(dataset="synth", methods=methods, budgets=budgets,
                            rounds=rounds, seed=seed, profile=TINY_PROFILE,
                            synth_train_recordings=4, synth_test_recordings=2)


def make_report():
    return ExperimentReport(rows=[
        CellResult("synth", "m2", 40, [90.0, 92.0, 94.0], 12.345),
        CellResult("synth", "cnn", 40, [80.0, 82.0, 81.0], 3.21),
        CellResult("synth", "m2", 400, [96.0, 95.0, float("nan")], 15.0),
    ])


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def test_emit_report_header_and_order(tmp_path):
    path = tmp_path / "report.csv"
    emit_report(make_report(), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "dataset,method,n_labels,acc_mean,acc_std,rounds,seconds"
    assert len(lines) == 4
    # sorted by (dataset, method, n_labels)
    assert lines[1].startswith("synth,cnn,40,")
    assert lines[2].startswith("synth,m2,40,")
    assert lines[3].startswith("synth,m2,400,")


def test_emit_report_two_decimal_round_trip(tmp_path):
    path = tmp_path / "report.csv"
    emit_report(make_report(), path)
    row = path.read_text().strip().splitlines()[2].split(",")
    assert row[3] == "92.00"
    assert float(row[4]) == pytest.approx(np.std([90.0, 92.0, 94.0]), abs=0.005)
    assert f"{float(row[3]):.2f}" == row[3]  # parses back to the printed value


def test_emit_report_failed_round_counts_completions(tmp_path):
    path = tmp_path / "report.csv"
    emit_report(make_report(), path)
    row = path.read_text().strip().splitlines()[3].split(",")
    assert row[5] == "2"  # one of three rounds failed
    assert float(row[3]) == pytest.approx(95.5)


def test_emit_report_re_emission_byte_identical(tmp_path):
    report = make_report()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_report(report, a, seconds_mode="wall")
    emit_report(report, b, seconds_mode="wall")
    assert a.read_bytes() == b.read_bytes()


def test_emit_report_seconds_mode_zero(tmp_path):
    path = tmp_path / "report.csv"
    emit_report(make_report(), path, seconds_mode="zero")
    for line in path.read_text().strip().splitlines()[1:]:
        assert line.endswith(",0.00")


def test_emit_report_empty_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        emit_report(ExperimentReport(), tmp_path / "no.csv")


def test_emit_rounds_sidecar_recovers_std(tmp_path):
    path = tmp_path / "rounds.csv"
    report = make_report()
    emit_rounds(report, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "dataset,method,n_labels,round,accuracy"
    vals = [float(line.split(",")[4]) for line in lines[1:]
            if line.startswith("synth,m2,40,")]
    assert np.std(vals) == pytest.approx(report.cell("m2", 40).std, abs=1e-9)


# ---------------------------------------------------------------------------
# Sweep mechanics
# ---------------------------------------------------------------------------

def test_run_sweep_single_round_single_method():
    report = run_sweep(tiny_config())
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row.method == "pca" and row.n_labels == 16
    assert len(row.accuracies) == 1
    assert row.std == 0.0
    assert 0.0 <= row.mean <= 100.0
    assert row.seconds > 0.0


def test_run_sweep_deterministic_given_seed():
    a = run_sweep(tiny_config(methods=("pca", "cnn"), rounds=2, seed=11))
    b = run_sweep(tiny_config(methods=("pca", "cnn"), rounds=2, seed=11))
    for ra, rb in zip(a.sorted_rows(), b.sorted_rows()):
        assert ra.accuracies == rb.accuracies


def test_run_sweep_failure_marks_row_and_continues(monkeypatch):
    real = bench.train_method

    def flaky(method, split, profile, n_classes, seed, return_log=False):
        if method == "cnn":
            raise TrainingDiverged("injected")
        return real(method, split, profile, n_classes, seed, return_log)

    monkeypatch.setattr(bench, "train_method", flaky)
    report = run_sweep(tiny_config(methods=("cnn", "pca")))
    cnn = report.cell("cnn", 16)
    pca = report.cell("pca", 16)
    assert math.isnan(cnn.accuracies[0]) and cnn.failed
    assert not pca.failed


def test_default_budgets_match_published_tables():
    assert DEFAULT_BUDGETS["cwru"] == (10, 50, 100, 300, 516, 860, 1075, 2150)
    assert DEFAULT_BUDGETS["ims"] == (10, 40, 100, 200, 400, 800, 1000, 2000, 4000, 8000)


def test_budgets_must_increase():
    cfg = tiny_config(budgets=(40, 40))
    with pytest.raises(ValueError, match="increasing"):
        run_sweep(cfg)


def test_unknown_method_rejected():
    with pytest.raises(ValueError, match="svm"):
        run_sweep(tiny_config(methods=("svm",)))


def test_rounds_must_be_positive():
    with pytest.raises(ValueError, match="rounds"):
        run_sweep(tiny_config(rounds=0))


def test_sweep_policy_defaults():
    assert tiny_config().resolved_policy() == "random"
    ims_cfg = ExperimentConfig(dataset="ims", root="/nowhere")
    assert ims_cfg.resolved_policy() == "from_end"


def test_evaluate_accuracy_chunking_consistent():
    train, test = make_synth_split(seed=5, train_recordings=3, test_recordings=1)
    split = label_budget(znorm(train), znorm(test), 24, seed=0)
    model = train_method("cnn", split, TINY_PROFILE, 4, seed=3)
    x_t, y_t = segments_matrix(split.test)
    assert evaluate_accuracy(model, x_t, y_t, chunk=7) == \
        evaluate_accuracy(model, x_t, y_t, chunk=1000)


def test_train_method_returns_log():
    train, test = make_synth_split(seed=6, train_recordings=3, test_recordings=1)
    split = label_budget(znorm(train), znorm(test), 24, seed=0)
    model, log = train_method("cnn", split, TINY_PROFILE, 4, seed=3, return_log=True)
    assert len(log) == TINY_PROFILE.epochs
    _, plog = train_method("pca", split, TINY_PROFILE, 4, seed=3, return_log=True)
    assert plog is None


# ---------------------------------------------------------------------------
# Reconstruction dumps
# ---------------------------------------------------------------------------

def small_trained_vae(seed=0, epochs=3, recordings=4, lr=1e-3):
    spec = EncoderSpec(input_dim=1024, filters=(4, 6), kernel=8, stride=4)
    train, _ = make_synth_split(seed=seed, train_recordings=recordings,
                                test_recordings=1)
    x, _ = segments_matrix(znorm(train))
    model = VaeModel(spec, latent_dim=8, seed=seed)
    fit_vae(model, x, TrainConfig(batch_size=80, epochs=epochs, lr=lr), RngStream(seed))
    return model, x


def test_dump_reconstructions_row_count_and_header(tmp_path):
    model, x = small_trained_vae()
    path = tmp_path / "recon.csv"
    xhat = dump_reconstructions(model, x[:5], path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 6
    header = lines[0].split(",")
    assert header[:2] == ["index", "mse"]
    assert header[2] == "x_0" and header[2 + 1024] == "xhat_0"
    assert xhat.shape == (5, 1024)


def test_dump_reconstruction_mse_column_matches(tmp_path):
    model, x = small_trained_vae()
    path = tmp_path / "recon.csv"
    xhat = dump_reconstructions(model, x[:3], path)
    row = path.read_text().strip().splitlines()[1].split(",")
    want = float(((x[0] - xhat[0]) ** 2).mean())
    assert float(row[1]) == pytest.approx(want, abs=1e-4)


def test_trained_model_beats_untrained_on_mse(tmp_path):
    spec = EncoderSpec(input_dim=1024, filters=(4, 6), kernel=8, stride=4)
    trained, x = small_trained_vae(epochs=12, recordings=8, lr=3e-3)
    untrained = VaeModel(spec, latent_dim=8, seed=0)
    probe = x[:50]
    mse_untrained = float(((probe - bench.reconstructions(untrained, probe)) ** 2).mean())
    mse_trained = float(((probe - bench.reconstructions(trained, probe)) ** 2).mean())
    # untrained output is near zero, so its error sits at the input power scale
    assert 0.3 <= mse_untrained / float((probe ** 2).mean()) <= 3.0
    assert mse_trained < mse_untrained


def test_dump_rejects_models_without_decoder(tmp_path):
    train, test = make_synth_split(seed=7, train_recordings=3, test_recordings=1)
    split = label_budget(znorm(train), znorm(test), 24, seed=0)
    cnn = train_method("cnn", split, TINY_PROFILE, 4, seed=1)
    with pytest.raises(ValueError, match="decoder"):
        dump_reconstructions(cnn, split.test[:2], tmp_path / "no.csv")


def test_load_any_model_dispatch(tmp_path):
    model, _ = small_trained_vae()
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = load_any_model(path)
    assert type(loaded).__name__ == "VaeModel"
    probe = RngStream(1).normal((2, 1024))
    assert np.array_equal(model.reconstruct(probe), loaded.reconstruct(probe))
