import sys

import numpy as np
import pytest

from spatspark.data import Container, SynthConfig, split_manifests, synth_generate


def central_diff(f, arr, idx, h=1e-5):
    """Central finite difference of scalar f() w.r.t. arr[idx] (arr mutated in place)."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def shape_walk_params(stem, widths, depths, T):
    """Element count from the architecture description alone."""
    conv = lambda ci, co, k, bias=False: ci * co * k * k + (co if bias else 0)
    bn = lambda c: 2 * c
    total = conv(T, stem, 3) + bn(stem)
    c_prev = stem
    for i, (c, n) in enumerate(zip(widths, depths)):
        for b in range(n):
            total += conv(c_prev, c, 3) + bn(c) + conv(c, c, 3) + bn(c)
            if (b == 0 and i > 0) or c_prev != c:
                total += conv(c_prev, c, 1) + bn(c)
            c_prev = c
    total += sum(widths)  # mask embeddings
    up = lambda ci, co: ci * co * 16 + co + conv(co, co, 3) + bn(co)
    total += sum(bn(c) + conv(c, c, 1, True) for c in widths)
    total += sum(up(widths[i + 1], widths[i]) for i in range(3))
    total += 2 * up(widths[0], widths[0]) + conv(widths[0], T, 1, True)
    total += sum(conv(c, c, 3, True) for c in widths)  # translation
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_container():
    frames = synth_generate(SynthConfig(n_frames=60, height=64, width=64, n_cells=20,
                                        cell_sigma=14.0, noise_sigma=0.0), seed=3)
    return Container(frames.astype(np.float32))


@pytest.fixture(scope="session")
def small_split(small_container):
    return split_manifests("memory", small_container, train_fraction=0.7)


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.VERDICTS):
        terminalreporter.write_line(acc.VERDICTS[n])
