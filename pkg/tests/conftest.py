import math

import numpy as np
import pytest

from saod.geometry import OrientedBox, points_in_box


def monte_carlo_iou(a: OrientedBox, b: OrientedBox, n: int, rng: np.random.Generator) -> float:
    """IoU estimated from uniform points in the joint bounding square."""
    r = max(a.radius, b.radius)
    lo = np.array([min(a.cx, b.cx) - r, min(a.cy, b.cy) - r])
    hi = np.array([max(a.cx, b.cx) + r, max(a.cy, b.cy) + r])
    pts = lo + (hi - lo) * rng.random((n, 2))
    ia, ib = points_in_box(pts, a), points_in_box(pts, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def monte_carlo_iou_in_a(a: OrientedBox, b: OrientedBox, n: int, rng: np.random.Generator) -> float:
    """IoU from uniform points inside ``a``: intersection = area(a) * fraction inside ``b``.

    Points are drawn in ``a``'s frame and mapped straight into ``b``'s frame,
    so each sample costs one rotation and two comparisons.
    """
    uv = (rng.random((n, 2), dtype=np.float32) - 0.5) * np.array([a.w, a.h], dtype=np.float32)
    rel = b.theta - a.theta
    c, s = math.cos(rel), math.sin(rel)
    dx, dy = a.cx - b.cx, a.cy - b.cy
    cb, sb = math.cos(b.theta), math.sin(b.theta)
    ox, oy = cb * dx + sb * dy, -sb * dx + cb * dy
    u = c * uv[:, 0] + s * uv[:, 1] + ox
    v = -s * uv[:, 0] + c * uv[:, 1] + oy
    frac = np.count_nonzero((np.abs(u) <= 0.5 * b.w) & (np.abs(v) <= 0.5 * b.h)) / n
    inter = a.w * a.h * frac
    return inter / (a.w * a.h + b.w * b.h - inter)


def random_box(rng: np.random.Generator, spread: float = 3.0) -> OrientedBox:
    return OrientedBox(rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                       rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0), rng.uniform(-np.pi, np.pi))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    """Elementwise relative error with an absolute floor on the denominator."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_diff(f, x: np.ndarray, idx, eps: float = 1e-5) -> float:
    """Central difference of scalar ``f`` w.r.t. ``x[idx]``; ``x`` is restored."""
    old = x[idx]
    x[idx] = old + eps
    hi = f()
    x[idx] = old - eps
    lo = f()
    x[idx] = old
    return (hi - lo) / (2 * eps)


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, total: int, name: str, ok: bool, detail: str) -> bool:
    """Store and print one PASS/FAIL line; returns ``ok``."""
    line = f"[{number:>2}/{total}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
