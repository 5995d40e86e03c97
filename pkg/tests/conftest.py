import itertools

import hypothesis
import numpy as np
import pytest

from hvq.layer import (
    QuantConfig,
    QuantizedLayer,
    column_groups,
    dequantize_codebook_int8,
    quantize_codebook_int8,
    round_fp16,
    row_blocks,
)

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spd(rng, m, cond_spread=1.0):
    """SPD matrix with eigenvalues spread over about ``cond_spread`` decades."""
    Q, _ = np.linalg.qr(rng.standard_normal((m, m)))
    eig = 10.0 ** rng.uniform(-cond_spread / 2, cond_spread / 2, size=m)
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


def exhaustive_kmeans_1d(points, n):
    """Brute-force optimum over every assignment of points to at most n clusters."""
    pts = np.asarray(points, dtype=np.float64).ravel()
    best = np.inf
    for labels in itertools.product(range(n), repeat=len(pts)):
        labels = np.array(labels)
        loss = 0.0
        for c in set(labels.tolist()):
            sel = pts[labels == c]
            loss += float(np.sum((sel - sel.mean()) ** 2))
        best = min(best, loss)
    return best


def random_layer(rng, N, M, d, n, k, int8=False, r=0):
    """A valid QuantizedLayer with random contents (all stored reals fp16-exact)."""
    cfg = QuantConfig(d=d, n=n, k=k, codebook_int8=int8, lowrank_r=r)
    groups = column_groups(M, d)
    blocks = row_blocks(N, k)
    index = rng.integers(0, n, size=(N, len(groups)))
    codebooks, params = [], ([] if int8 else None)
    for _ in blocks:
        row, prow = [], []
        for cols in groups:
            cb = round_fp16(rng.standard_normal((n, len(cols))))
            if int8:
                q = quantize_codebook_int8(cb)
                prow.append(q)
                cb = dequantize_codebook_int8(q)
            row.append(cb)
        codebooks.append(row)
        if int8:
            params.append(prow)
    A = B = None
    if r:
        A = round_fp16(rng.standard_normal((N, r)))
        B = round_fp16(rng.standard_normal((r, M)))
    return QuantizedLayer(N, M, cfg, index, codebooks, params, A, B)


def dequantize_scalar(layer):
    """Element-by-element reconstruction straight from the index/codebook definition."""
    k, d = layer.config.k, layer.config.d
    out = np.zeros((layer.N, layer.M))
    for i in range(layer.N):
        for j in range(layer.index.shape[1]):
            cb = layer.codebooks[i // k][j]
            for l in range(cb.shape[1]):
                out[i, d * j + l] = cb[layer.index[i, j], l]
    if layer.lowrank_A is not None:
        for i in range(layer.N):
            for c in range(layer.M):
                out[i, c] += sum(layer.lowrank_A[i, t] * layer.lowrank_B[t, c] for t in range(layer.lowrank_r))
    return out


ACCEPTANCE: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
