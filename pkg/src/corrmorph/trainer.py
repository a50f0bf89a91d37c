"""Training loop, simulation, evaluation metrics, and the ablation driver.

A run is deterministic in (config, dataset): parameter init, epoch shuffling,
and every forward/backward are seeded or seed-free, so repeated runs produce
byte-identical checkpoints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import multiprocessing
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .fileio import read_mesh, read_points_csv, write_ply
from .geometry import (
    NORMALIZED,
    PHYSICAL,
    DisplacementField,
    NormTransform,
    PointSet,
    TriMesh,
    idw_interpolate,
    normalize_pair,
    point_mesh_distance,
)
from .losses import LossWeights, hybrid_loss, neighbor_lists
from .network import (
    VARIANTS,
    CaseCache,
    ModelConfig,
    ModelParams,
    PRESETS,
    forward,
    init_params,
)
from .optim import AdamState, adam_step, init_adam
from .synthdata import load_manifest, region_labels, REGION_NAMES


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient goes NaN; identifies epoch and batch."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_at: float = 0.6  # fraction of epochs after which lr is decayed
    weights: LossWeights = field(default_factory=LossWeights)
    preset: str = "toy"
    variant: str = "attention"
    seed: int = 0
    fold: int | None = 0  # held-out fold; None trains on every case
    neighbor_k: int = 8
    density_k: int = 8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {tuple(PRESETS)}, got {self.preset!r}")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {"density": self.weights.density, "relative": self.weights.relative}
        return d


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs > 0 and epoch >= int(cfg.lr_decay_at * cfg.epochs):
        return cfg.lr * cfg.lr_decay
    return cfg.lr


# ---------------------------------------------------------------------------
# Case loading


@dataclass
class CaseData:
    """One case's samples in both frames plus cached per-case constants."""

    name: str
    path: Path
    skin_samples: np.ndarray
    skin_sample_disp: np.ndarray
    bone_samples: np.ndarray
    bone_sample_disp: np.ndarray
    norm: NormTransform
    driven_n: np.ndarray
    driver_n: np.ndarray
    driver_disp_n: np.ndarray
    target_n: np.ndarray
    target_disp_n: np.ndarray
    neighbor_idx: np.ndarray
    cache: CaseCache = field(default_factory=CaseCache)

    @property
    def n_points(self) -> int:
        return self.skin_samples.shape[0]


def load_case(case_dir: str | Path, neighbor_k: int = 8) -> CaseData:
    case_dir = Path(case_dir)
    skin_xyz, skin_disp = read_points_csv(case_dir / "samples_skin.csv")
    bone_xyz, bone_disp = read_points_csv(case_dir / "samples_bone.csv")
    if skin_disp is None or bone_disp is None:
        raise ValueError(f"{case_dir}: sample CSVs must carry displacement columns")
    facial = PointSet(skin_xyz, unit=PHYSICAL)
    bony_pre = PointSet(bone_xyz, unit=PHYSICAL)
    bony_post = PointSet(bone_xyz + bone_disp, unit=PHYSICAL)
    facial_n, bony_pre_n, bony_post_n, norm = normalize_pair(facial, bony_pre, bony_post)
    driver_disp_n = bony_post_n.coords - bony_pre_n.coords
    target_n = norm.apply(skin_xyz + skin_disp)
    return CaseData(
        name=case_dir.name,
        path=case_dir,
        skin_samples=skin_xyz,
        skin_sample_disp=skin_disp,
        bone_samples=bone_xyz,
        bone_sample_disp=bone_disp,
        norm=norm,
        driven_n=facial_n.coords,
        driver_n=bony_pre_n.coords,
        driver_disp_n=driver_disp_n,
        target_n=target_n,
        target_disp_n=target_n - facial_n.coords,
        neighbor_idx=neighbor_lists(facial_n.coords, k=neighbor_k),
    )


def dataset_hash(data_dir: str | Path) -> str:
    """Content hash of the dataset manifest, recorded next to every artifact."""
    raw = (Path(data_dir) / "manifest.json").read_bytes()
    return hashlib.sha256(raw).hexdigest()[:16]


def _fold_case_ids(manifest: dict, fold: int | None, train_split: bool) -> list[int]:
    n = len(manifest["cases"])
    if fold is None:
        return list(range(n)) if train_split else []
    folds = manifest["folds"]
    if not 0 <= fold < len(folds):
        raise ValueError(f"fold {fold} out of range for {len(folds)} folds")
    held = set(folds[fold])
    ids = [i for i in range(n) if (i not in held) == train_split]
    return ids


# ---------------------------------------------------------------------------
# Training


def _case_loss(case: CaseData, params: ModelParams, cfg: TrainConfig):
    pred, movement = forward(
        case.driven_n, case.driver_n, case.driver_disp_n, params, cache=case.cache
    )
    return hybrid_loss(
        pred,
        case.target_n,
        movement,
        case.target_disp_n,
        case.neighbor_idx,
        weights=cfg.weights,
        density_k=cfg.density_k,
    )


def train(
    cfg: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    log_every: int = 0,
) -> tuple[ModelParams, list[dict]]:
    """Optimize the hybrid loss over the training folds.

    Writes `checkpoint.bin`, `loss_curve.csv`, and `run.json` into out_dir and
    returns the trained parameters plus the per-epoch history.
    """
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir)
    train_ids = _fold_case_ids(manifest, cfg.fold, train_split=True)
    if not train_ids:
        raise ValueError("no training cases selected")
    cases = [
        load_case(data_dir / manifest["cases"][i], neighbor_k=cfg.neighbor_k) for i in train_ids
    ]
    n_points = cases[0].n_points
    model_config = PRESETS[cfg.preset](variant=cfg.variant, n_points=n_points)
    params = init_params(model_config, cfg.seed)
    state = init_adam(params.blocks)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(cases))
        sums = {"shape": 0.0, "density": 0.0, "relative": 0.0, "total": 0.0}
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [cases[i] for i in order[b0 : b0 + cfg.batch_size]]
            params.zero_grads()
            with Tape() as tape:
                total = None
                for case in batch:
                    loss, parts = _case_loss(case, params, cfg)
                    for k in sums:
                        sums[k] += parts[k]
                    total = loss if total is None else ad.add(total, loss)
                total = ad.affine(total, 1.0 / len(batch))
            if not np.isfinite(total.values):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {b0 // cfg.batch_size}"
                )
            tape.backward(total)
            grads = {n: t.grad for n, t in params.blocks.items() if t.grad is not None}
            try:
                adam_step(params.blocks, grads, state, lr)
            except ValueError as e:
                raise TrainingDiverged(
                    f"{e} at epoch {epoch}, batch {b0 // cfg.batch_size}"
                ) from e
        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / len(cases) for k, v in sums.items()})
        history.append(row)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            print(
                f"epoch {epoch:4d} lr {lr:.1e} total {row['total']:.6f} "
                f"shape {row['shape']:.6f}",
                flush=True,
            )

    _write_history(out_dir / "loss_curve.csv", history)
    header = {
        "model": model_config.to_dict(),
        "train": cfg.to_dict(),
        "dataset_hash": dataset_hash(data_dir),
        "epochs_completed": cfg.epochs,
    }
    save_checkpoint(out_dir / "checkpoint.bin", header, params.named_arrays())
    (out_dir / "run.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return params, history


def _write_history(path: Path, history: list[dict]) -> None:
    cols = ["epoch", "lr", "shape", "density", "relative", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] for c in cols])


def load_params(checkpoint_path: str | Path) -> tuple[ModelParams, dict]:
    header, blocks, _ = load_checkpoint(checkpoint_path)
    config = ModelConfig.from_dict(header["model"])
    params = init_params(config, seed=0)
    if set(params.blocks) != set(blocks):
        raise ValueError("checkpoint blocks do not match the architecture in its header")
    for name, arr in blocks.items():
        if params.blocks[name].values.shape != arr.shape:
            raise ValueError(f"checkpoint block {name!r} has shape {arr.shape}, expected "
                             f"{params.blocks[name].values.shape}")
        params.blocks[name].values = arr
    return params, header


# ---------------------------------------------------------------------------
# Simulation


def simulate(params: ModelParams, case: CaseData, interp_k: int = 3) -> tuple[TriMesh, float]:
    """Predict the post-movement skin mesh for one case.

    normalize -> forward -> denormalize -> interpolate sampled movement to all
    mesh vertices -> displace. The face list is untouched. Returns the mesh and
    the wall-clock seconds of the whole prediction.
    """
    if params.config.n_points != case.n_points:
        raise ValueError(
            f"checkpoint expects {params.config.n_points} sample points, "
            f"case has {case.n_points}"
        )
    t0 = time.perf_counter()
    _, movement = forward(
        case.driven_n, case.driver_n, case.driver_disp_n, params, cache=case.cache
    )
    disp_n = DisplacementField(movement.values, unit=NORMALIZED)
    disp_mm = disp_n.vectors * case.norm.scale
    skin_mesh = read_mesh(case.path / "skin.ply")
    vertex_disp = idw_interpolate(
        PointSet(case.skin_samples, unit=PHYSICAL),
        disp_mm,
        PointSet(skin_mesh.vertices, unit=PHYSICAL),
        k=interp_k,
    )
    pred = TriMesh(skin_mesh.vertices + vertex_disp, skin_mesh.faces)
    return pred, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class CaseMetrics:
    name: str
    entire: float
    regions: dict[str, float]
    seconds: float
    per_vertex: np.ndarray


def evaluate_mesh(
    pred_mesh: TriMesh, gt_mesh: TriMesh, labels: np.ndarray
) -> tuple[float, dict[str, float], np.ndarray]:
    """Directional surface deviation: distance from every predicted vertex to
    the ground-truth surface, aggregated with barycentric vertex-area weights
    (the entire-surface value is the area-weighted mean over vertices, not the
    mean of region means)."""
    labels = np.asarray(labels)
    if labels.shape[0] != len(pred_mesh.vertices):
        raise ValueError(
            f"{labels.shape[0]} region labels for {len(pred_mesh.vertices)} vertices"
        )
    err = point_mesh_distance(pred_mesh.vertices, gt_mesh)
    w = pred_mesh.vertex_areas()
    entire = float((err * w).sum() / w.sum())
    regions: dict[str, float] = {}
    for rid, rname in enumerate(REGION_NAMES):
        mask = labels == rid
        regions[rname] = float((err[mask] * w[mask]).sum() / w[mask].sum()) if mask.any() else float("nan")
    return entire, regions, err


def gt_skin_mesh(case_dir: str | Path) -> tuple[TriMesh, TriMesh, np.ndarray]:
    """(pre-skin mesh, ground-truth post-skin mesh, per-vertex region labels)."""
    case_dir = Path(case_dir)
    pre = read_mesh(case_dir / "skin.ply")
    xyz, disp = read_points_csv(case_dir / "skin_disp.csv")
    if disp is None or xyz.shape != pre.vertices.shape:
        raise ValueError(f"{case_dir}: skin_disp.csv does not match skin.ply vertices")
    gt = TriMesh(pre.vertices + disp, pre.faces)
    labels = region_labels(pre.vertices, pre.vertices.mean(axis=0))
    return pre, gt, labels


def evaluate_case(params: ModelParams, case: CaseData) -> CaseMetrics:
    pred, seconds = simulate(params, case)
    _, gt, labels = gt_skin_mesh(case.path)
    entire, regions, err = evaluate_mesh(pred, gt, labels)
    return CaseMetrics(case.name, entire, regions, seconds, err)


def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())  # population std (n divisor)


@dataclass
class MetricsReport:
    """Per-case and aggregate surface deviation, in millimeters.

    The deviation is directional (predicted vertex -> ground-truth surface) and
    the std is the population standard deviation over cases.
    """

    cases: list[CaseMetrics]

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {"entire": _mean_std([c.entire for c in self.cases])}
        for rname in REGION_NAMES:
            vals = [c.regions[rname] for c in self.cases if np.isfinite(c.regions[rname])]
            out[rname] = _mean_std(vals) if vals else (float("nan"), float("nan"))
        return out

    def write_csv(self, path: str | Path) -> None:
        agg = self.aggregate()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            fh.write("# directional deviation: predicted vertex -> ground-truth surface (mm)\n")
            fh.write("# std = population standard deviation over cases\n")
            w.writerow(["case"] + list(REGION_NAMES) + ["entire", "seconds"])
            for c in self.cases:
                w.writerow(
                    [c.name]
                    + [f"{c.regions[r]:.6f}" for r in REGION_NAMES]
                    + [f"{c.entire:.6f}", f"{c.seconds:.3f}"]
                )
            w.writerow(
                ["mean±std"]
                + [f"{agg[r][0]:.4f}±{agg[r][1]:.4f}" for r in REGION_NAMES]
                + [f"{agg['entire'][0]:.4f}±{agg['entire'][1]:.4f}", ""]
            )


# ---------------------------------------------------------------------------
# Ablation suite


ABLATION_VARIANTS = ("attention", "closest", "no_corr")


def _ablate_one(args: tuple) -> dict:
    data_dir, base_cfg_dict, variant, seed, out_root = args
    weights = LossWeights(**base_cfg_dict.pop("weights"))
    cfg = TrainConfig(**base_cfg_dict, weights=weights, variant=variant, seed=seed)
    run_dir = Path(out_root) / f"{variant}_seed{seed}"
    params, _ = train(cfg, data_dir, run_dir)
    manifest = load_manifest(data_dir)
    test_ids = _fold_case_ids(manifest, cfg.fold, train_split=False)
    report = MetricsReport(
        [
            evaluate_case(params, load_case(Path(data_dir) / manifest["cases"][i], cfg.neighbor_k))
            for i in test_ids
        ]
    )
    report.write_csv(run_dir / "metrics.csv")
    agg = report.aggregate()
    return {
        "variant": variant,
        "seed": seed,
        "entire": agg["entire"],
        "regions": {r: agg[r] for r in REGION_NAMES},
        "per_case_entire": [c.entire for c in report.cases],
    }


def run_ablation_suite(
    data_dir: str | Path,
    base_cfg: TrainConfig,
    seeds: tuple[int, ...],
    out_dir: str | Path,
    jobs: int = 1,
) -> dict:
    """Train all three variants with shared seeds and folds; evaluate on the
    held-out fold; emit a comparison table (rows = variants, columns = regions
    + entire surface)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = base_cfg.to_dict()
    base.pop("variant")
    base.pop("seed")
    work = [
        (str(data_dir), dict(base), variant, seed, str(out_dir))
        for variant in ABLATION_VARIANTS
        for seed in seeds
    ]
    if jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(jobs) as pool:
            results = pool.map(_ablate_one, work)
    else:
        results = [_ablate_one(w) for w in work]

    by_variant: dict[str, list[dict]] = {v: [] for v in ABLATION_VARIANTS}
    for r in results:
        by_variant[r["variant"]].append(r)

    table_rows = []
    for variant in ABLATION_VARIANTS:
        runs = by_variant[variant]
        pooled = [e for r in runs for e in r["per_case_entire"]]
        row = {"variant": variant, "entire": _mean_std(pooled)}
        for rname in REGION_NAMES:
            vals = [r["regions"][rname][0] for r in runs]
            row[rname] = _mean_std(vals)
        table_rows.append(row)

    with open(out_dir / "ablation_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        fh.write("# surface deviation error mean±std (mm), held-out fold\n")
        w.writerow(["variant"] + list(REGION_NAMES) + ["entire"])
        for row in table_rows:
            w.writerow(
                [row["variant"]]
                + [f"{row[r][0]:.4f}±{row[r][1]:.4f}" for r in REGION_NAMES]
                + [f"{row['entire'][0]:.4f}±{row['entire'][1]:.4f}"]
            )
    with open(out_dir / "ablation_per_seed.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "entire_mean", "entire_std"])
        for r in results:
            w.writerow([r["variant"], r["seed"], f"{r['entire'][0]:.6f}", f"{r['entire'][1]:.6f}"])

    summary = {
        "runs": results,
        "table": {
            row["variant"]: {k: v for k, v in row.items() if k != "variant"} for row in table_rows
        },
    }
    (out_dir / "ablation_summary.json").write_text(
        json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"
    )
    return summary


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x
