"""Central finite-difference verification of the reverse-mode engine.

Two levels: every primitive standalone (tolerance 1e-6) and the full movement
model composed with the hybrid loss (tolerance 1e-4). Kinked primitives
(relu, abs, max) are probed away from their kinks; the end-to-end check uses
a fixed seed with comfortable margins to nearest-neighbor reassignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .losses import LossWeights, hybrid_loss, neighbor_lists
from .network import forward, init_params, toy_config

PRIMITIVE_TOL = 1e-6
END_TO_END_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name:<24s} max rel err {self.max_err:.3e} (tol {self.tol:.0e})"


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def _fd_full(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of f w.r.t. every element of arr (mutated in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def _max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return max(
        (rel_error(a, n) for a, n in zip(analytic.reshape(-1), numeric.reshape(-1))),
        default=0.0,
    )


def _separated(rng: np.random.Generator, shape, axis: int, min_gap: float = 1e-3) -> np.ndarray:
    """Uniform values with all pairwise gaps > min_gap along `axis`, so
    max-pooling argmax choices cannot flip under the FD step."""
    while True:
        x = rng.uniform(-1.0, 1.0, size=shape)
        if np.all(np.diff(np.sort(x, axis=axis), axis=axis) > min_gap):
            return x


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.sign(x) * (margin + np.abs(x))


def _check_op(build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray]) -> float:
    """Max rel error of analytic vs FD gradients of sum(proj * op(inputs))."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    with Tape() as tape:
        out = build(tensors)
        proj = np.linspace(0.5, 1.5, out.values.size).reshape(out.values.shape)
        loss = ad.sum_reduce(ad.mul(out, Tensor(proj)))
    tape.backward(loss)

    def f():
        val = build([Tensor(x.values) for x in tensors]).values
        return float((val * proj).sum())

    worst = 0.0
    for t in tensors:
        fd = _fd_full(f, t.values)
        worst = max(worst, _max_rel_err(t.grad, fd))
    return worst


def check_primitives(n_seeds: int = 20) -> list[CheckResult]:
    """Exhaustive FD check of every primitive over randomized small inputs."""
    results: dict[str, float] = {}

    def run(name, build, make_inputs):
        worst = 0.0
        for seed in range(n_seeds):
            rng = np.random.default_rng(1000 + seed)
            worst = max(worst, _check_op(build, make_inputs(rng)))
        results[name] = worst

    run("add", lambda t: ad.add(t[0], t[1]),
        lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))])
    run("sub", lambda t: ad.sub(t[0], t[1]),
        lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 1, 4))])
    run("mul", lambda t: ad.mul(t[0], t[1]),
        lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))])
    run("scale_add", lambda t: ad.scale_add(t[0], t[1], 0.3, 5.0),
        lambda r: [r.normal(size=(4,)), r.normal(size=(4,))])
    run("affine", lambda t: ad.affine(t[0], 2.0, -1.0),
        lambda r: [r.normal(size=(3, 3))])
    run("matmul", lambda t: ad.matmul(t[0], t[1]),
        lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))])
    run("matmul_batched", lambda t: ad.matmul(t[0], t[1]),
        lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))])
    run("pointwise_linear", lambda t: ad.pointwise_linear(t[0], t[1], t[2]),
        lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 3)), r.normal(size=(3,))])
    run("relu", lambda t: ad.relu(t[0]),
        lambda r: [_away_from_zero(r, (3, 4))])
    run("sigmoid", lambda t: ad.sigmoid(t[0]),
        lambda r: [r.normal(size=(3, 4))])
    run("sqrt", lambda t: ad.sqrt(t[0]),
        lambda r: [0.5 + r.random(size=(3, 4))])
    run("absolute", lambda t: ad.absolute(t[0]),
        lambda r: [_away_from_zero(r, (3, 4))])
    run("max_reduce", lambda t: ad.max_reduce(t[0], axis=1),
        lambda r: [_separated(r, (3, 5, 2), axis=1)])
    run("sum_reduce", lambda t: ad.sum_reduce(t[0], axis=0),
        lambda r: [r.normal(size=(4, 3))])
    run("mean_reduce", lambda t: ad.mean_reduce(t[0], axis=1),
        lambda r: [r.normal(size=(3, 4))])
    run("concat", lambda t: ad.concat([t[0], t[1]], axis=-1),
        lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 3))])
    run("gather_rows", lambda t: ad.gather_rows(t[0], np.array([[0, 2], [2, 2], [1, 0]])),
        lambda r: [r.normal(size=(4, 3))])
    run("reshape", lambda t: ad.reshape(t[0], (6, 2)),
        lambda r: [r.normal(size=(3, 4))])
    run("transpose", lambda t: ad.transpose(t[0]),
        lambda r: [r.normal(size=(3, 4))])

    return [CheckResult(name, err, PRIMITIVE_TOL) for name, err in results.items()]


def check_mlp(n_seeds: int = 5) -> CheckResult:
    """Composed 3-layer MLP as one standalone check."""
    worst = 0.0
    for seed in range(n_seeds):
        rng = np.random.default_rng(2000 + seed)
        x = rng.normal(size=(5, 4))
        shapes = [(4, 8), (8, 6), (6, 3)]
        arrays = []
        for a, b in shapes:
            arrays += [rng.normal(size=(a, b)) * 0.5, rng.normal(size=(b,)) * 0.1]

        def build(tensors):
            h = Tensor(x)
            for k in range(3):
                h = ad.pointwise_linear(h, tensors[2 * k], tensors[2 * k + 1])
                if k < 2:
                    h = ad.relu(h)
            return ad.sigmoid(h)

        worst = max(worst, _check_op(build, arrays))
    return CheckResult("mlp_3layer", worst, PRIMITIVE_TOL)


def _toy_problem(seed: int, n_points: int = 256):
    """Random normalized-frame case on two noisy spheres + a model instance."""
    rng = np.random.default_rng(seed)

    def sphere(n, radius):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * radius * rng.uniform(0.9, 1.1, size=(n, 1))

    driven = sphere(n_points, 0.9)
    driver = sphere(n_points, 0.7)
    driver_disp = rng.normal(size=(n_points, 3)) * 0.05
    target = driven + rng.normal(size=(n_points, 3)) * 0.05
    config = toy_config("attention", n_points)
    params = init_params(config, seed=seed)
    return driven, driver, driver_disp, target, params


def check_end_to_end(seed: int = 7, probes_per_block: int = 4) -> CheckResult:
    """Full forward + hybrid loss vs FD on a sampled subset of every block."""
    driven, driver, driver_disp, target, params = _toy_problem(seed)
    neighbor_idx = neighbor_lists(driven, k=8)
    weights = LossWeights()

    def loss_value() -> float:
        pred, movement = forward(driven, driver, driver_disp, params)
        total, _ = hybrid_loss(pred, target, movement, target - driven, neighbor_idx, weights)
        return float(total.values)

    params.zero_grads()
    with Tape() as tape:
        pred, movement = forward(driven, driver, driver_disp, params)
        total, _ = hybrid_loss(pred, target, movement, target - driven, neighbor_idx, weights)
    tape.backward(total)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, block in params.blocks.items():
        flat = block.values.reshape(-1)
        gflat = block.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(probes_per_block, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + FD_STEP
            fp = loss_value()
            flat[idx] = orig - FD_STEP
            fm = loss_value()
            flat[idx] = orig
            fd = (fp - fm) / (2.0 * FD_STEP)
            worst = max(worst, rel_error(gflat[idx], fd))
    return CheckResult("end_to_end_toy", worst, END_TO_END_TOL)


def run_all(n_seeds: int = 20, e2e_probes: int = 4, verbose: bool = True) -> bool:
    results = check_primitives(n_seeds)
    results.append(check_mlp())
    results.append(check_end_to_end(probes_per_block=e2e_probes))
    ok = all(r.passed for r in results)
    if verbose:
        for r in results:
            print(r.line())
        print("gradcheck:", "all passed" if ok else "FAILURES present")
    return ok
