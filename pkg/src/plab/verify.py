"""Self-contained oracle suites behind ``plab verify``.

Each suite checks an implementation against an independent route:
the low-rank preconditioner against a dense SPD solve, the tape engine
against central finite differences, and the rank metrics against closed
forms plus their invariances. All suites are deterministic.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as mx
from .arrow import GradientWindow, woodbury_apply
from .linalg import solve_spd
from .model import MiniViTConfig, build
from .seeding import derive_rng


@dataclass(frozen=True)
class SuiteResult:
    name: str
    ok: bool
    detail: str
    elapsed: float


def woodbury_suite(n: int = 1000, seed: int = 20240, d_max: int = 200, k_max: int = 30,
                   tol: float = 1e-8) -> SuiteResult:
    """Low-rank apply vs dense (alpha I + beta C) solve on randomized instances."""
    t0 = time.perf_counter()
    rng = derive_rng(seed)
    worst = 0.0
    for _ in range(n):
        d = int(rng.integers(2, d_max + 1))
        k = int(rng.integers(1, k_max + 1))
        alpha = float(10.0 ** rng.uniform(-5, 0))
        beta = float(rng.uniform(0.0, 1.3))
        win = GradientWindow(d, k)
        for _ in range(k):
            win.push(rng.normal(size=d) / np.sqrt(d))
        g = rng.normal(size=d) / np.sqrt(d)
        got = woodbury_apply(win, alpha, beta, g)
        gmat = win.matrix()
        dense = alpha * np.eye(d) + (beta / k) * (gmat @ gmat.T)
        ref = solve_spd(dense, g)
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
    ok = worst <= tol
    return SuiteResult("woodbury", ok, f"{n} instances, max rel err {worst:.3e} (tol {tol:g})",
                       time.perf_counter() - t0)


# Coordinates with |gradient| below this are skipped by the FD comparison:
# central differences at eps=1e-4 cannot resolve them relative to 1e-4.
FD_MIN_GRAD = 1e-4


def vit_fd_check(seed: int, n_params: int = 20, eps: float = 1e-4,
                 batch: int = 8) -> tuple[float, int]:
    """Max relative backward-vs-central-FD error over sampled coordinates."""
    cfg = MiniViTConfig()
    mdl = build(cfg, seed)
    rng = derive_rng(seed, 777)
    images = rng.normal(size=(batch, cfg.image_side, cfg.image_side)) * 0.5
    labels = rng.integers(0, cfg.classes_per_task, size=batch)
    params = [g.tensor for g in mdl.trainable_groups(task=0)]

    def loss_value() -> float:
        return float(ad.cross_entropy(mdl.forward(images, 0), labels).data)

    with ad.Tape() as tape:
        loss = ad.cross_entropy(mdl.forward(images, 0), labels)
        grads = tape.gradients(loss, params)

    worst = 0.0
    checked = 0
    attempts = 0
    while checked < n_params and attempts < 50 * n_params:
        attempts += 1
        p = params[int(rng.integers(len(params)))]
        flat = p.data.ravel()
        i = int(rng.integers(flat.size))
        analytic = float(grads[p].ravel()[i])
        if abs(analytic) < FD_MIN_GRAD:
            continue
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_value()
        flat[i] = orig - eps
        down = loss_value()
        flat[i] = orig
        fd = (up - down) / (2.0 * eps)
        worst = max(worst, abs(analytic - fd) / max(abs(analytic), abs(fd)))
        checked += 1
    return worst, checked


def gradient_suite(seeds=(0, 1, 2, 3, 4), n_params: int = 20, tol: float = 1e-4) -> SuiteResult:
    """Mini-ViT backward vs central finite differences across seeds."""
    t0 = time.perf_counter()
    worst = 0.0
    total = 0
    for seed in seeds:
        err, checked = vit_fd_check(seed, n_params=n_params)
        worst = max(worst, err)
        total += checked
    ok = worst <= tol and total >= n_params * len(seeds)
    return SuiteResult("gradient", ok,
                       f"{total} coordinates over {len(seeds)} seeds, max rel err {worst:.3e} (tol {tol:g})",
                       time.perf_counter() - t0)


def rank_suite(n: int = 100, seed: int = 4048) -> SuiteResult:
    """Closed-form spectrum fixtures plus scale/permutation invariance."""
    t0 = time.perf_counter()
    problems = []
    fixtures = [
        (mx.erank([1.0, 1.0, 1.0, 1.0]), 4.0, "erank uniform"),
        (mx.srank([1.0, 1.0, 1.0, 1.0]), 4.0, "srank uniform"),
        (mx.srank([2.0, 1.0]), 1.25, "srank 2:1"),
        (mx.erank([3.0, 1.0]), 1.7548, "erank 3:1"),
    ]
    for got, want, name in fixtures:
        if abs(got - want) > 1e-4:
            problems.append(f"{name}: got {got:.6f}, want {want}")
    rng = derive_rng(seed)
    for _ in range(n):
        m = int(rng.integers(2, 12))
        w = int(rng.integers(2, 12))
        a = rng.normal(size=(m, w))
        c = float(rng.uniform(0.1, 10.0)) * (-1.0 if rng.random() < 0.5 else 1.0)
        base = mx.rank_of_matrix(a)
        scaled = mx.rank_of_matrix(c * a)
        perm = mx.rank_of_matrix(a[rng.permutation(m)][:, rng.permutation(w)])
        for other, tag in ((scaled, "scale"), (perm, "permutation")):
            if abs(base.erank - other.erank) > 1e-8 or abs(base.srank - other.srank) > 1e-8:
                problems.append(f"{tag} invariance broken (erank {base.erank} vs {other.erank})")
    ok = not problems
    detail = f"fixtures + {n} invariance draws" if ok else "; ".join(problems[:3])
    return SuiteResult("rank-metrics", ok, detail, time.perf_counter() - t0)


def run_all() -> int:
    """Run every suite, print one line each; exit code 0 iff all pass."""
    results = [woodbury_suite(), gradient_suite(), rank_suite()]
    failed = False
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"[{status}] {r.name}: {r.detail} ({r.elapsed:.1f}s)")
        failed |= not r.ok
    return 1 if failed else 0
