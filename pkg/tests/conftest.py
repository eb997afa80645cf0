import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_conv3d(x, w, b):
    """Direct zero-padded convolution by explicit loops over offsets; an
    oracle independent of the flat-offset implementation."""
    B, C, X, Y, Z = x.shape
    O, _, kx, ky, kz = w.shape
    px, py, pz = kx // 2, ky // 2, kz // 2
    out = np.zeros((B, O, X, Y, Z), dtype=np.float64)
    for i in range(X):
        for j in range(Y):
            for k in range(Z):
                acc = np.zeros((B, O))
                for a in range(kx):
                    for c in range(ky):
                        for d in range(kz):
                            u, v, s = i + a - px, j + c - py, k + d - pz
                            if 0 <= u < X and 0 <= v < Y and 0 <= s < Z:
                                acc += x[:, :, u, v, s] @ w[:, :, a, c, d].T
                out[:, :, i, j, k] = acc + b
    return out


def flood_fill(mask):
    """26-connected labelling by breadth-first search, scanning voxels in
    x-fastest raster order."""
    mask = np.asarray(mask, dtype=bool)
    X, Y, Z = mask.shape
    labels = np.zeros(mask.shape, dtype=int)
    n = 0
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                if not mask[x, y, z] or labels[x, y, z]:
                    continue
                n += 1
                labels[x, y, z] = n
                queue = [(x, y, z)]
                while queue:
                    cx, cy, cz = queue.pop()
                    for dx in (-1, 0, 1):
                        for dy in (-1, 0, 1):
                            for dz in (-1, 0, 1):
                                u, v, w = cx + dx, cy + dy, cz + dz
                                if (0 <= u < X and 0 <= v < Y and 0 <= w < Z
                                        and mask[u, v, w] and not labels[u, v, w]):
                                    labels[u, v, w] = n
                                    queue.append((u, v, w))
    return labels, n


def counts_by_rank(heatmap):
    """Component count of {M >= v_k} for every k, where v_0 >= v_1 >= ... are
    the heatmap values sorted descending.  Voxels are added one at a time
    and merged with already-active 26-neighbours through union-find, so one
    pass yields the count for every threshold."""
    m = np.asarray(heatmap, dtype=np.float64)
    X, Y, Z = m.shape
    flat = m.reshape(-1, order="F")  # x-fastest raster order
    order = sorted(range(flat.size), key=lambda i: -flat[i])
    parent = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    counts, n = [], 0
    for i in order:
        x, y, z = i % X, (i // X) % Y, i // (X * Y)
        parent[i] = i
        n += 1
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    u, v, w = x + dx, y + dy, z + dz
                    if 0 <= u < X and 0 <= v < Y and 0 <= w < Z:
                        j = u + X * (v + Y * w)
                        if j in parent:
                            ri, rj = find(i), find(j)
                            if ri != rj:
                                parent[ri] = rj
                                n -= 1
        counts.append(n)
    return np.sort(flat)[::-1], counts


def sweep_oracle(heatmap, target):
    """Exhaustive threshold selection: the 256-level quantile grid rebuilt
    from a full sort of the positive values, with component counts from
    incremental union-find."""
    m = np.asarray(heatmap, dtype=np.float64)
    if target == 0:
        return m.max() + 1.0
    pos = np.sort(m[m > 0])
    if pos.size == 0:
        return m.max() + 1.0
    cands = []
    for q in np.linspace(0, 1, 256):
        h = q * (pos.size - 1)
        lo = int(np.floor(h))
        hi = min(lo + 1, pos.size - 1)
        g = h - lo
        a, b = pos[lo], pos[hi]
        # interpolate from the nearer end so the grid matches linear quantiles
        cands.append(a + (b - a) * g if g < 0.5 else b - (b - a) * (1 - g))
    values, counts = counts_by_rank(m)
    best_t, best_d = None, None
    for t in sorted(set(cands)):  # ascending, so later equal-distance entries are larger
        k = int((values >= t).sum())
        d = abs(counts[k - 1] - target)
        if best_d is None or d <= best_d:
            best_t, best_d = t, d
    return best_t


# acceptance reporting: one pass/fail line per criterion in the terminal summary

ACCEPTANCE_TITLES = {
    1: "gradient correctness",
    2: "train/test architecture identity",
    3: "heatmap resolution",
    4: "threshold and component oracle equivalence",
    5: "end-to-end synthetic reproduction",
    6: "FROC monotone target sweep",
    7: "persistence",
    8: "determinism",
}
ACCEPTANCE_DETAILS: dict[int, list[str]] = {}
_ACCEPTANCE_OUTCOMES: dict[int, bool] = {}


def record(criterion: int, line: str) -> None:
    ACCEPTANCE_DETAILS.setdefault(criterion, []).append(line)


def _criterion_of(nodeid: str):
    name = nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" in nodeid and name.startswith("test_criterion_"):
        return int(name.split("_")[2])
    return None


def pytest_runtest_logreport(report):
    n = _criterion_of(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed:
        ok = report.passed if report.when == "call" else False
        _ACCEPTANCE_OUTCOMES[n] = _ACCEPTANCE_OUTCOMES.get(n, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        if n not in _ACCEPTANCE_OUTCOMES:
            continue
        status = "PASS" if _ACCEPTANCE_OUTCOMES[n] else "FAIL"
        tr.write_line(f"criterion {n} ({ACCEPTANCE_TITLES[n]}): {status}")
        for line in ACCEPTANCE_DETAILS.get(n, []):
            tr.write_line(f"    {line}")
