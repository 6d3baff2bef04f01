"""Acceptance criteria AC1-AC9, one summary line each.

Every test collects named sub-checks, prints ``[PASS]``/``[FAIL]`` with the
details, and then asserts. The lines are repeated at the end of the pytest
run under "acceptance criteria".
"""

import math
import struct
import time

import numpy as np
import pytest
from configs import ACCEPTANCE, TINY
from conftest import ACCEPTANCE_LINES
from oracles import (
    brute_force_ranks,
    pearson_extended,
    spearman_closed_form,
    t_tail_by_quadrature,
)
from test_datasets import mean_entropy, write_fixture
from test_embedding import categorical_fisher_mc
from test_probe import finite_difference_agreement

from fedready.datasets import dirichlet_partition, load_idx, make_blobs, write_idx
from fedready.errors import DegenerateInputError, IdxParseError
from fedready.fedsim import ClientUpdate, FedAvgConfig, fedavg_aggregate, run_federation
from fedready.harness import build_federation, parse_sweep_config, read_csv, run_sweep
from fedready.numcore import student_t_two_sided_p
from fedready.probe import ProbeSpec, softmax
from fedready.readiness import CdiWeights, average_entropy, build_report, cohesion, density, dispersion
from fedready.stats import pearson, rank_average_ties, spearman

EMITTED_CSVS = []


def record(ac, title, checks):
    """checks: list of (label, ok, detail)."""
    ok = all(c[1] for c in checks)
    parts = [f"{label} {'ok' if good else 'FAILED'} ({detail})" for label, good, detail in checks]
    line = f"[{'PASS' if ok else 'FAIL'}] {ac} {title}: " + "; ".join(parts)
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def csv_without_wall_time(path):
    return [",".join(line.split(",")[:-1]) for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def acceptance_sweep(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance") / "sweep.csv"
    t0 = time.perf_counter()
    rows = run_sweep(parse_sweep_config(ACCEPTANCE), path)
    EMITTED_CSVS.append(path)
    return rows, path, time.perf_counter() - t0


def test_ac1_end_to_end_substitute(acceptance_sweep):
    rows, _, elapsed = acceptance_sweep
    print("Full-scale correlations (r > 0.9 with ResNet34 on CIFAR-10 / MedMNIST) are not reproducible "
          "at desk scale; this is the substituted blobs check.")
    checks = []
    assert all(r.ok for r in rows), [r.status for r in rows if not r.ok]
    for metric in ("cohesion", "neg_dispersion", "avg_entropy"):
        signs = []
        for seed in range(5):
            mine = sorted((r for r in rows if r.seed == seed), key=lambda r: r.alpha)
            xs = [getattr(r, metric) for r in mine]
            ys = [r.final_metric for r in mine]
            try:
                signs.append(spearman(xs, ys).r)
            except DegenerateInputError:  # constant column: no positive correlation
                signs.append(float("nan"))
        wins = sum(s > 0 for s in signs)
        detail = f"{wins}/5 seeds r>0, r=" + ",".join(f"{s:+.2f}" for s in signs)
        checks.append((metric, wins >= 4, detail))
    checks.append(("runtime", elapsed < 600, f"{elapsed:.0f}s"))
    record("AC1", "desk-scale substitute (full-scale r > 0.9 not reproducible here); "
                  "Spearman(readiness, top-1) > 0 in >=4/5 seeds", checks)


def test_ac2_fisher_oracle():
    t0 = time.perf_counter()
    theta = np.array([0.4, -0.3, 1.1, 0.0, -1.0])
    p = softmax(theta[None])[0]
    est = categorical_fisher_mc(theta, 50_000, seed=0)
    rel = np.abs(est / (p * (1 - p)) - 1)
    elapsed = time.perf_counter() - t0
    record("AC2", "MC Fisher vs p(1-p) at 5e4 draws", [
        ("max relative error", bool(np.all(rel <= 0.05)), f"{rel.max():.4f} <= 0.05"),
        ("runtime", elapsed < 30, f"{elapsed:.2f}s"),
    ])


def test_ac3_gradient_check():
    t0 = time.perf_counter()
    ok, total = finite_difference_agreement(ProbeSpec(), seed=3)
    elapsed = time.perf_counter() - t0
    frac = ok / total
    record("AC3", "backward vs central differences (default 2-conv probe)", [
        ("agreement", frac >= 0.99, f"{ok}/{total} = {frac:.4f} within 1e-5 relative"),
        ("runtime", elapsed < 10, f"{elapsed:.2f}s"),
    ])


def test_ac4_readiness_examples():
    from fedready.datasets import LabelHistogram

    coh = cohesion([[1, 0], [1, 1], [0, 1]])
    d_pair = density([[0.0, 0.0], [3.0, 4.0]])
    d_line = density([[0.0], [1.0], [3.0]])
    disp = dispersion([[2.0, 0, 0, 0], [-2.0, 0, 0, 0]])
    hist = [LabelHistogram(np.arange(3), np.array([0.5, 0.25, 0.25])), LabelHistogram(np.arange(1), np.ones(1))]
    ent = average_entropy(hist)
    g = np.random.default_rng(0)
    worst = 0.0
    from fedready.datasets import ClientShard, FederationSnapshot
    from fedready.embedding import TaskEmbedding

    for trial in range(50):
        k = int(g.integers(2, 8))
        fed = FederationSnapshot([ClientShard(i, np.zeros((2, 1, 8, 8)), g.integers(0, 3, 2)) for i in range(k)],
                                 None, 1.0, 3)
        embs = [TaskEmbedding(g.random(6) + 0.01, i) for i in range(k)]
        w = CdiWeights(float(g.uniform(0.1, 5)), float(g.uniform(1, 2000)))
        r = build_report(fed, embs, w)
        worst = max(worst, abs(r.cdi - (w.beta * r.cohesion + w.gamma * r.neg_dispersion)))
    record("AC4", "readiness examples", [
        ("cohesion", abs(coh - 0.4714045207910317) <= 1e-9, f"{coh:.10f}"),
        ("density pair", abs(d_pair - math.exp(-0.5)) <= 1e-9, f"{d_pair:.10f} vs e^-1/2"),
        ("density collinear", abs(d_line - (math.exp(-1 / 8) + math.exp(-1 / 2) + math.exp(-9 / 8)) / 3) <= 1e-9,
         f"{d_line:.10f}"),
        ("dispersion", disp == 1.0, f"{disp}"),
        ("CDI example", abs((1 * coh - 1000 * 1.0) - (-999.5285954792)) <= 1e-9, f"{coh - 1000:.10f}"),
        ("CDI identity", worst <= 1e-12, f"max |diff| {worst:.1e} over 50 reports"),
        ("entropy", abs(ent - 0.5198603854199589) <= 1e-9, f"{ent:.10f}"),
    ])


def test_ac5_statistics():
    x, y = (1, 2, 3, 4, 5), (2, 1, 4, 3, 7)
    res = pearson(x, y)
    n = len(x)
    p_oracle = t_tail_by_quadrature(res.r * math.sqrt((n - 2) / (1 - res.r ** 2)), n - 2)
    r_ext = pearson_extended(x, y)

    g = np.random.default_rng(5)
    worst_closed = 0.0
    for _ in range(200):
        m = int(g.integers(3, 15))
        a, b = g.permutation(m), g.permutation(m)
        worst_closed = max(worst_closed, abs(spearman(a, b).r - spearman_closed_form(a, b)))
    worst_closed = max(worst_closed, abs(spearman([1, 2, 3, 4], [10, 30, 20, 40]).r - 0.8))
    worst_tie = 0.0
    for _ in range(200):
        m = int(g.integers(3, 15))
        a, b = g.integers(0, 4, m), g.integers(0, 4, m)
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        worst_tie = max(worst_tie, abs(spearman(a, b).r - pearson(brute_force_ranks(a), brute_force_ranks(b)).r))
    ranks_ok = rank_average_ties([3, 1, 3, 2]).tolist() == [3.5, 1, 3.5, 2]

    transforms = (lambda v: np.exp(v / 10), lambda v: v ** 3, lambda v: np.arctan(v / 10), lambda v: 3 * v - 7)
    worst_mono, used = 0.0, 0
    while used < 1000:
        m = int(g.integers(3, 13))
        a = g.integers(-500, 501, m) / 10
        b = g.integers(-20, 20, m) / 2
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        f = transforms[used % len(transforms)]
        worst_mono = max(worst_mono, abs(spearman(f(a), b).r - spearman(a, b).r),
                         abs(spearman(a, f(b)).r - spearman(a, b).r))
        used += 1
    cauchy = student_t_two_sided_p(1.0, 1)
    record("AC5", "statistics suite", [
        ("Pearson r vs stated 0.8320503", abs(res.r - 0.8320503) <= 1e-9,
         f"got {res.r:.10f}; 50-digit oracle {r_ext:.10f} = 12/sqrt(212)"),
        ("Pearson r vs extended-precision oracle", abs(res.r - r_ext) <= 1e-9, f"|diff| {abs(res.r - r_ext):.1e}"),
        ("Pearson p vs quadrature", abs(res.p_value - p_oracle) <= 1e-4, f"{res.p_value:.7f} vs {p_oracle:.7f}"),
        ("tie ranks + Spearman with ties", ranks_ok and worst_tie <= 1e-12, f"max |diff| {worst_tie:.1e}"),
        ("no-tie closed form", worst_closed <= 1e-12, f"max |diff| {worst_closed:.1e}"),
        ("Cauchy p(1, dof 1)", abs(cauchy - 0.5) <= 1e-10, f"{cauchy!r}"),
        ("monotone invariance", worst_mono <= 1e-12, f"{used} instances, max |diff| {worst_mono:.1e}"),
    ])


def test_ac6_fedavg_invariants(acceptance_sweep, tmp_path):
    equal = fedavg_aggregate([ClientUpdate(0, [np.array([1.0, 2.0])], 5), ClientUpdate(1, [np.array([3.0, 6.0])], 5)])
    weighted = fedavg_aggregate([ClientUpdate(0, [np.array([0.0])], 1), ClientUpdate(1, [np.array([4.0])], 3)])

    cfg = parse_sweep_config(ACCEPTANCE)
    fed, spec = build_federation(cfg, 5, 0.5, 0)
    fa = FedAvgConfig(rounds=2, batch_size=8, seed=0)
    serial = run_federation(fed, spec, fa, workers=1)
    par = run_federation(fed, spec, fa, workers=4)
    bitwise = all(a.tobytes() == b.tobytes() for a, b in zip(serial.final_state.params, par.final_state.params))

    _, first, _ = acceptance_sweep
    second = tmp_path / "rerun.csv"
    run_sweep(cfg, second)
    EMITTED_CSVS.append(second)
    same = csv_without_wall_time(first) == csv_without_wall_time(second)
    record("AC6", "FedAvg protocol invariants", [
        ("equal-weight mean", equal[0].tolist() == [2.0, 4.0], f"{equal[0].tolist()}"),
        ("weighted scalar", weighted[0].tolist() == [3.0], f"{weighted[0].tolist()}"),
        ("workers 1 vs 4", bitwise, "bitwise-identical weights" if bitwise else "weights differ"),
        ("sweep rerun", same, "CSV identical except wall_time_s" if same else "CSV differs"),
    ])


def test_ac7_partition_invariants():
    pool = make_blobs(10, 1, 8, 40, seed=0)
    g = np.random.default_rng(2024)
    bad = []
    for draw in range(200):
        alpha = float(np.exp(g.uniform(np.log(0.01), np.log(20.0))))
        K = int(g.integers(2, 21))
        seed = int(g.integers(0, 100_000))
        fed = dirichlet_partition(pool, K, alpha, 8, seed)
        idx = np.concatenate([s.indices for s in fed.shards])
        good = (len(idx) == len(pool) and len(np.unique(idx)) == len(idx)
                and min(s.n_c for s in fed.shards) >= 8
                and all(np.array_equal(pool.labels[s.indices], s.labels) for s in fed.shards))
        if not good:
            bad.append((alpha, K, seed))
    seeds = range(20)
    ent = {a: [mean_entropy(dirichlet_partition(pool, 5, a, 8, s)) for s in seeds] for a in (0.05, 0.5, 5.0)}
    steps = []
    for lo, hi in ((0.05, 0.5), (0.5, 5.0)):
        diff = np.mean(ent[hi]) - np.mean(ent[lo])
        se = math.sqrt(np.var(ent[hi], ddof=1) / 20 + np.var(ent[lo], ddof=1) / 20)
        steps.append((diff, se))
    means = ", ".join(f"{np.mean(v):.3f}" for v in ent.values())
    record("AC7", "partition invariants", [
        ("fuzz", not bad, f"{200 - len(bad)}/200 draws disjoint, exhaustive, >= 8 per client"),
        ("entropy vs alpha", all(d > -3 * s for d, s in steps),
         f"means {means} nats; steps " + ", ".join(f"{d:+.3f} (3se {3 * s:.3f})" for d, s in steps)),
    ])


def test_ac8_idx_ingestion(tmp_path):
    rng = np.random.default_rng(8)
    pixels = rng.integers(0, 256, (6, 5, 5))
    labels = rng.integers(0, 10, 6).tolist()
    img, lab = write_fixture(tmp_path, pixels, labels)
    data = load_idx(img, lab)
    write_idx(data, tmp_path / "o-img", tmp_path / "o-lab")
    round_trip = (tmp_path / "o-img").read_bytes() == img.read_bytes() and \
        (tmp_path / "o-lab").read_bytes() == lab.read_bytes()

    def error_of(img_bytes, lab_bytes):
        (tmp_path / "e-img").write_bytes(img_bytes)
        (tmp_path / "e-lab").write_bytes(lab_bytes)
        try:
            load_idx(tmp_path / "e-img", tmp_path / "e-lab")
        except IdxParseError as exc:
            return exc
        return None

    raw_img, raw_lab = img.read_bytes(), lab.read_bytes()
    magic = error_of(b"\x00\x00\x08\x02" + raw_img[4:], raw_lab)
    short_lab = bytes([0, 0, 8, 1]) + struct.pack(">I", 5) + bytes(labels[:5])
    count = error_of(raw_img, short_lab)
    trunc = error_of(raw_img[:-3], raw_lab)
    record("AC8", "IDX ingestion", [
        ("round trip", round_trip, "byte-exact images and labels"),
        ("bad magic", magic is not None and magic.offset == 0 and "0x00000802" in str(magic), str(magic)),
        ("count mismatch", count is not None and count.offset == 4 and "does not match" in str(count), str(count)),
        ("truncation", trunc is not None and trunc.offset == len(raw_img) - 3 and "truncated" in str(trunc),
         str(trunc)),
    ])


def test_ac9_cdi_configuration(acceptance_sweep, tmp_path):
    w = CdiWeights()
    tiny_path = tmp_path / "tiny.csv"
    run_sweep(parse_sweep_config(TINY), tiny_path)
    EMITTED_CSVS.append(tiny_path)
    rows = [r for p in dict.fromkeys(EMITTED_CSVS) for r in read_csv(p)]
    worst = max(abs(r.cdi - (w.beta * r.cohesion + w.gamma * r.neg_dispersion)) for r in rows)
    record("AC9", "CDI weighting", [
        ("defaults", (w.beta, w.gamma) == (1.0, 1000.0), f"beta={w.beta:g}, gamma={w.gamma:g}"),
        ("identity on emitted rows", worst <= 1e-12,
         f"{len(rows)} rows from {len(set(EMITTED_CSVS))} CSVs, max |diff| {worst:.1e}"),
    ])
