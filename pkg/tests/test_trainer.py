import numpy as np
import pytest

import corrmorph.trainer as trainer_mod
from corrmorph.geometry import TriMesh
from corrmorph.network import init_params, toy_config
from corrmorph.synthdata import load_manifest
from corrmorph.trainer import (
    MetricsReport,
    CaseMetrics,
    TrainConfig,
    TrainingDiverged,
    evaluate_case,
    evaluate_mesh,
    gt_skin_mesh,
    load_case,
    load_params,
    lr_at,
    simulate,
    train,
)


@pytest.fixture(scope="module")
def short_cfg():
    return TrainConfig(epochs=2, variant="attention", preset="toy", seed=5, fold=0)


def test_lr_schedule():
    cfg = TrainConfig(epochs=500, lr=1e-3)
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 299) == 1e-3
    assert lr_at(cfg, 300) == pytest.approx(1e-4)
    assert lr_at(cfg, 499) == pytest.approx(1e-4)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(preset="huge")


def test_zero_epochs_checkpoint_equals_init(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=0, variant="closest", preset="toy", seed=3, fold=0)
    params, history = train(cfg, tiny_dataset, tmp_path / "run")
    assert history == []
    fresh = init_params(params.config, cfg.seed)
    for name, t in params.blocks.items():
        assert np.array_equal(t.values, fresh.blocks[name].values)
    loaded, header = load_params(tmp_path / "run" / "checkpoint.bin")
    assert header["train"]["epochs"] == 0
    for name, t in params.blocks.items():
        assert np.array_equal(t.values, loaded.blocks[name].values)


def test_training_decreases_loss(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=30, variant="closest", preset="toy", seed=1, fold=0)
    _, history = train(cfg, tiny_dataset, tmp_path / "run")
    assert history[-1]["total"] < history[0]["total"]


def test_training_deterministic(tiny_dataset, tmp_path, short_cfg):
    train(short_cfg, tiny_dataset, tmp_path / "a")
    train(short_cfg, tiny_dataset, tmp_path / "b")
    ba = (tmp_path / "a" / "checkpoint.bin").read_bytes()
    bb = (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert ba == bb
    assert (tmp_path / "a" / "loss_curve.csv").read_bytes() == (
        tmp_path / "b" / "loss_curve.csv"
    ).read_bytes()


def test_bad_fold_rejected(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=1, fold=9)
    with pytest.raises(ValueError, match="fold"):
        train(cfg, tiny_dataset, tmp_path / "run")


def test_fold_none_trains_on_all(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=1, variant="closest", preset="toy", seed=0, fold=None)
    _, history = train(cfg, tiny_dataset, tmp_path / "run")
    assert len(history) == 1


def test_divergence_reports_epoch_and_batch(tiny_dataset, tmp_path, monkeypatch):
    real = trainer_mod._case_loss

    def poisoned(case, params, cfg):
        loss, parts = real(case, params, cfg)
        loss.values = np.array(np.nan)
        return loss, parts

    monkeypatch.setattr(trainer_mod, "_case_loss", poisoned)
    cfg = TrainConfig(epochs=1, variant="closest", preset="toy", seed=0, fold=0)
    with pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
        train(cfg, tiny_dataset, tmp_path / "run")


# ---------------------------------------------------------------------------
# Simulation


def test_simulate_preserves_topology(tiny_dataset, tmp_path, short_cfg):
    params, _ = train(short_cfg, tiny_dataset, tmp_path / "run")
    manifest = load_manifest(tiny_dataset)
    case = load_case(tiny_dataset / manifest["cases"][0])
    pre, _, _ = gt_skin_mesh(case.path)
    mesh, seconds = simulate(params, case)
    assert np.array_equal(mesh.faces, pre.faces)
    assert mesh.vertices.shape == pre.vertices.shape
    assert seconds > 0.0


def test_simulate_rejects_mismatched_checkpoint(tiny_dataset, tmp_path):
    params = init_params(toy_config("closest", 64), seed=0)  # dataset has 128 samples
    manifest = load_manifest(tiny_dataset)
    case = load_case(tiny_dataset / manifest["cases"][0])
    with pytest.raises(ValueError, match="sample points"):
        simulate(params, case)


def test_simulate_deterministic_bytes(tiny_dataset, tmp_path, short_cfg):
    from corrmorph.fileio import write_ply

    params, _ = train(short_cfg, tiny_dataset, tmp_path / "run")
    case = load_case(tiny_dataset / "case_000")
    m1, _ = simulate(params, case)
    m2, _ = simulate(params, case)
    write_ply(tmp_path / "m1.ply", m1)
    write_ply(tmp_path / "m2.ply", m2)
    assert (tmp_path / "m1.ply").read_bytes() == (tmp_path / "m2.ply").read_bytes()


# ---------------------------------------------------------------------------
# Evaluation


def test_evaluate_zero_for_identical_meshes(tiny_dataset):
    pre, gt, labels = gt_skin_mesh(tiny_dataset / "case_000")
    entire, regions, err = evaluate_mesh(gt, gt, labels)
    assert entire == pytest.approx(0.0, abs=1e-9)
    assert err.max() < 1e-9


def test_evaluate_offset_plane_is_exact():
    n = 6
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            faces += [[a, a + 1, a + n], [a + 1, a + n + 1, a + n]]
    plane = TriMesh(verts, faces)
    lifted = TriMesh(verts + [0.0, 0.0, 1.0], faces)
    entire, _, err = evaluate_mesh(lifted, plane, np.zeros(n * n, dtype=int))
    assert abs(entire - 1.0) < 1e-6
    assert np.abs(err - 1.0).max() < 1e-9


def test_evaluate_label_count_mismatch(tiny_dataset):
    pre, gt, labels = gt_skin_mesh(tiny_dataset / "case_000")
    with pytest.raises(ValueError, match="labels"):
        evaluate_mesh(gt, gt, labels[:-1])


def test_evaluate_case_and_report(tiny_dataset, tmp_path, short_cfg):
    params, _ = train(short_cfg, tiny_dataset, tmp_path / "run")
    manifest = load_manifest(tiny_dataset)
    held = manifest["folds"][0]
    report = MetricsReport(
        [evaluate_case(params, load_case(tiny_dataset / manifest["cases"][i])) for i in held]
    )
    agg = report.aggregate()
    assert agg["entire"][0] > 0.0
    report.write_csv(tmp_path / "metrics.csv")
    text = (tmp_path / "metrics.csv").read_text()
    assert "directional" in text and "population" in text
    assert text.count("case_") == len(held)


def test_ablation_table_schema(tiny_dataset, tmp_path):
    from corrmorph.trainer import run_ablation_suite

    cfg = TrainConfig(epochs=1, preset="toy", fold=0)
    summary = run_ablation_suite(tiny_dataset, cfg, seeds=(0,), out_dir=tmp_path / "abl")
    lines = [
        l for l in (tmp_path / "abl" / "ablation_table.csv").read_text().splitlines()
        if not l.startswith("#")
    ]
    header = lines[0].split(",")
    assert header[0] == "variant" and len(header) == 8  # 6 regions + entire
    assert [l.split(",")[0] for l in lines[1:]] == ["attention", "closest", "no_corr"]
    assert len(lines) == 1 + 3
    assert set(summary["table"]) == {"attention", "closest", "no_corr"}
    assert (tmp_path / "abl" / "ablation_per_seed.csv").exists()
    assert (tmp_path / "abl" / "ablation_summary.json").exists()


def test_metrics_population_std():
    from corrmorph.synthdata import REGION_NAMES

    mk = lambda name, e: CaseMetrics(name, e, {r: e for r in REGION_NAMES}, 0.0, np.zeros(1))
    report = MetricsReport([mk("a", 1.0), mk("b", 3.0)])
    mean, std = report.aggregate()["entire"]
    assert mean == 2.0
    assert std == 1.0  # population (n divisor), not sample
