"""Acceptance criteria 1-11.

Each test ends in ``_check``, which prints and records one PASS/FAIL line
(runtime budgets included) and then asserts.  The collected lines are
repeated in the pytest terminal summary.
"""
import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

import oracles
import test_metrics
from lesionuq.aggregate import (
    BASELINE_ETA, cohort_voxel_range, filter_voxels, retained_candidates,
    cohort_lesion_uncertainty, roc_sweep,
)
from lesionuq.cli import main
from lesionuq.experiment import DEFAULT_THETAS, filtering_experiment, phantom_scans
from lesionuq.lesions import (
    connected_components_18, label_components, prune_ground_truth,
)
from lesionuq.measures import (
    MEASURES, entropy_kernel, mutual_information, mutual_information_kernel,
    predictive_variance_kernel, sample_variance_kernel,
)
from lesionuq.metrics import match_lesions
from lesionuq.phantom import PhantomConfig
from lesionuq.rng import Stream
from lesionuq.toynet import (
    LOSS_FORMS, ToyNet, draw, learned_variance_experiment, mc_loss, mc_loss_and_grad,
)
from lesionuq.volume import LabelMask

LINES = {}


def _check(n, ok, detail, t0, budget=None):
    elapsed = time.perf_counter() - t0
    in_time = budget is None or elapsed < budget
    limit = f", budget {budget:g} s" if budget is not None else ""
    verdict = "PASS" if ok and in_time else "FAIL"
    line = f"criterion {n:2d}: {verdict}  {detail}  [{elapsed:.2f} s{limit}]"
    LINES[n] = line
    print(line)
    assert ok, line
    assert in_time, line


def _col(ps):
    return np.array(ps, dtype=np.float64).reshape(-1, 1)


# --- 1 -----------------------------------------------------------------------------

def test_criterion_01_analytic_identities():
    t0 = time.perf_counter()
    ln2 = math.log(2)
    checks = {
        "entropy(0.5 stack) = ln 2": entropy_kernel(np.full((10, 1), 0.5))[0] - ln2,
        "entropy(all 0) = 0": entropy_kernel(np.zeros((10, 1)))[0],
        "entropy(all 1) = 0": entropy_kernel(np.ones((10, 1)))[0],
        "MI(identical) = 0": mutual_information_kernel(np.full((10, 1), 0.3))[0],
        "MI({0,1}) = ln 2": mutual_information_kernel(_col([0.0, 1.0]))[0] - ln2,
        "samplevar({0,1}) = 0.25": sample_variance_kernel(_col([0.0, 1.0]))[0] - 0.25,
    }
    worst = max(abs(v) for v in checks.values())
    _check(1, worst <= 1e-9, f"{len(checks)} identities, max |error| {worst:.1e} (tol 1e-9)", t0, 1)


# --- 2 -----------------------------------------------------------------------------

def test_criterion_02_scalar_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240602)
    worst = 0.0
    for i in range(1000):
        T = int(rng.integers(1, 17))
        # float32-representable samples, with saturated values mixed in
        ps = rng.random(T).astype(np.float32)
        if i % 10 == 0:
            ps[rng.random(T) < 0.3] = rng.choice([0.0, 1.0])
        vs = (rng.random(T) * rng.choice([1e-3, 1.0, 50.0])).astype(np.float32)
        ps, vs = ps.astype(float).tolist(), vs.astype(float).tolist()
        pairs = [
            (entropy_kernel(_col(ps))[0], oracles.mp_entropy(ps)),
            (mutual_information_kernel(_col(ps))[0], oracles.mp_mutual_information(ps)),
            (sample_variance_kernel(_col(ps))[0], oracles.mp_sample_variance(ps)),
            (predictive_variance_kernel(_col(vs))[0], oracles.mp_predictive_variance(vs)),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    _check(2, worst <= 1e-9, f"1000 tuples x 4 measures, max |error| {worst:.1e} (tol 1e-9)", t0, 5)


# --- 3 -----------------------------------------------------------------------------

POW2 = 2.0 ** np.arange(27)


def _bits_of(labels, count):
    """Components as ints over F-order flat bits of a 3x3x3 label volume."""
    lab = labels.ravel(order="F")
    on = lab >= 0
    # sums of distinct powers below 2**27 are exact in float64
    return [int(v) for v in np.bincount(lab[on], weights=POW2[on], minlength=count)]


def _all_small_masks(max_voxels):
    """Every mask of a 3x3x3 grid with at most ``max_voxels`` set, as
    (n, 27) F-order bit rows and the matching oracle bit sets."""
    rows, ints = [], []
    for k in range(max_voxels + 1):
        combos = np.array(list(itertools.combinations(range(27), k)), dtype=np.int64)
        combos = combos.reshape(math.comb(27, k), k)
        block = np.zeros((len(combos), 27), dtype=bool)
        block[np.repeat(np.arange(len(combos)), k), combos.ravel()] = True
        rows.append(block)
        ints += [sum(1 << i for i in c) for c in combos.tolist()]
    return np.concatenate(rows), ints


def _label_stacked(masks):
    """Label every mask in one call, stacked along z with empty planes between.

    An 18-neighbour differs by at most one voxel per axis, so no component
    crosses an empty plane.  The flat index is block-major, so components
    come out block by block in the order a lone 3x3x3 call gives them.
    """
    n = len(masks)
    # row index 9z + 3y + x, so a C reshape gives axes (block, z, y, x)
    blocks = masks.reshape(n, 3, 3, 3)
    vol = np.zeros((3, 3, n, 4), dtype=bool)
    vol[:, :, :, :3] = blocks.transpose(3, 2, 0, 1)
    labels, count = label_components(vol.reshape(3, 3, 4 * n))
    lab = labels.reshape(3, 3, n, 4)[:, :, :, :3].transpose(2, 3, 1, 0).reshape(n, 27)
    on = lab >= 0
    owner = np.broadcast_to(np.arange(n)[:, None], (n, 27))[on]
    bits = np.bincount(lab[on], weights=np.broadcast_to(POW2, (n, 27))[on], minlength=count)
    comp_owner = np.zeros(count, dtype=np.int64)
    comp_owner[lab[on]] = owner
    parts = np.split(bits, np.searchsorted(comp_owner, np.arange(1, n)))
    return [[int(v) for v in part] for part in parts]


def test_criterion_03_connected_components():
    t0 = time.perf_counter()
    dims = (3, 3, 3)
    nbr = oracles.neighbour_bits(dims)
    masks, ints = _all_small_masks(6)
    want = [oracles.bitmask_components(m, nbr) for m in ints]
    mismatches = sum(g != w for g, w in zip(_label_stacked(masks), want))
    # small masks again, each as its own 3x3x3 volume
    n_alone = sum(math.comb(27, k) for k in range(5))
    for row, w in zip(masks[:n_alone], want):
        mismatches += _bits_of(*label_components(row.reshape(dims, order="F"))) != w
    rng = np.random.default_rng(16)
    big = (16, 16, 16)
    for _ in range(50):
        bits = rng.random(big) < rng.uniform(0.05, 0.5)
        les = connected_components_18(LabelMask(bits))
        got = [set(map(tuple, l.voxels.tolist())) for l in les]
        expected = oracles.bfs_components(set(map(tuple, np.argwhere(bits).tolist())), big)
        mismatches += got != expected
    _check(3, mismatches == 0 and len(masks) == 397594,
           f"{len(masks)} masks of 3x3x3 (those up to 4 voxels also one call each) "
           f"+ 50 random 16^3, {mismatches} mismatches", t0, 30)


# --- 4 -----------------------------------------------------------------------------

def _planar_family(dims, max_voxels):
    """Masks of a z=1 grid with at most two components, with oracle parts."""
    cells = [(x, y, 0) for y in range(dims[1]) for x in range(dims[0])]
    gts, cands = [], []
    for k in range(max_voxels + 1):
        for combo in itertools.combinations(cells, k):
            comps = oracles.bfs_components(set(combo), dims)
            if len(comps) > 2:
                continue
            bits = np.zeros(dims, dtype=bool)
            for c in combo:
                bits[c] = True
            les = connected_components_18(LabelMask(bits))
            entry = {"n": k, "sets": comps, "lesions": les}
            cands.append(entry)
            if all(len(s) >= 3 for s in comps):
                gts.append(dict(entry, lesions=prune_ground_truth(les)))
    for c in cands:
        c["reach"], c["grown"] = oracles.candidate_reach(c["sets"], dims)
    return gts, cands


def _scene_agrees(g, c, dims):
    m = match_lesions(c["lesions"], g["lesions"], dims)
    gs, cs = oracles.match_with_reach(g["sets"], c["sets"], c["reach"], c["grown"])
    return ([m.gt_assignments[l.id] for l in g["lesions"]] == gs
            and [m.candidate_assignments[l.id] for l in c["lesions"]] == cs)


EDGE_CASES = [
    test_metrics.test_edge_at_least_three_overlapping_voxels,
    test_metrics.test_edge_more_than_half_of_a_small_lesion,
    test_metrics.test_edge_size_two_candidate_is_ignored,
    test_metrics.test_edge_dilation_mediated_overlap,
]


def test_criterion_04_matching_oracle():
    t0 = time.perf_counter()
    scenes = disagreements = 0
    # every scene of the full 3x3x1 family
    dims = (3, 3, 1)
    gts, cands = _planar_family(dims, 9)
    for g in gts:
        for c in cands:
            scenes += 1
            disagreements += not _scene_agrees(g, c, dims)
    # every 4x4x1 scene with at most six lesion voxels in total
    dims = (4, 4, 1)
    gts, cands = _planar_family(dims, 6)
    for g in gts:
        for c in cands:
            if g["n"] + c["n"] <= 6:
                scenes += 1
                disagreements += not _scene_agrees(g, c, dims)
    edge_failures = []
    for case in EDGE_CASES:
        try:
            case()
        except AssertionError:
            edge_failures.append(case.__name__)
    _check(4, disagreements == 0 and not edge_failures,
           f"{scenes} scenes (all 3x3x1; 4x4x1 up to 6 voxels), {disagreements} disagreements; "
           f"{len(EDGE_CASES) - len(edge_failures)}/{len(EDGE_CASES)} named edge cases pass",
           t0, 60)


# --- 5 -----------------------------------------------------------------------------

ETAS = [1.0, 0.8, 0.6, 0.4, 0.2, 0.0]


def _ids(lesions):
    return {l.id for l in lesions}


def test_criterion_05_subset_monotonicity():
    t0 = time.perf_counter()
    scans = phantom_scans(20)
    thetas = [0.25, 0.5, 0.75]
    problems = []
    baselines = {}
    for m in MEASURES:
        vrange = cohort_voxel_range(scans, m)
        cohort = cohort_lesion_uncertainty(scans, m, thetas)
        for k, s in enumerate(scans):
            for t in thetas:
                prev_vox = prev_les = None
                for eta in [BASELINE_ETA, *ETAS]:
                    f = filter_voxels(s.mean, s.umap(m), t, eta, vrange)
                    kept = _ids(retained_candidates(s.candidates(t), cohort[t][k], eta))
                    if prev_vox is not None:
                        if (f.predicted.bits & ~prev_vox).any():
                            problems.append(f"voxel {m} {s.name} theta={t} eta={eta}")
                        if not kept <= prev_les:
                            problems.append(f"lesion {m} {s.name} theta={t} eta={eta}")
                    prev_vox, prev_les = f.predicted.bits, kept
        for level in ("voxel", "lesion"):
            table = roc_sweep(scans, m, level, ETAS, thetas)
            for t in thetas:
                for b in {r.bin for r in table.rows}:
                    rows = table.select(theta=t, bin=b)
                    ret = [r.retention for r in rows]
                    if any(a < c for a, c in zip(ret, ret[1:])):
                        problems.append(f"retention {m} {level} theta={t} bin={b}")
            base = [(r.bin, r.theta, r.tp, r.fp, r.fn, r.retention) for r in table.baseline()]
            baselines.setdefault(level, set()).add(tuple(base))
    for level, variants in baselines.items():
        if len(variants) != 1:
            problems.append(f"baseline rows differ across measures at {level} level")
    _check(5, not problems,
           f"20 scenes x {len(MEASURES)} measures x {len(ETAS) + 1} etas, {len(problems)} violations"
           + (f" (first: {problems[0]})" if problems else ""), t0, 120)


# --- 6, 7, 8 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def filtering():
    t0 = time.perf_counter()
    scans = phantom_scans(50)
    results = {m: filtering_experiment(scans, m, DEFAULT_THETAS, 0.98) for m in MEASURES}
    return scans, results, time.perf_counter() - t0


def test_criterion_06_filtering_improves(filtering):
    t0 = time.perf_counter()
    scans, results, setup = filtering
    t0 -= setup  # the experiment itself ran in the fixture
    parts, ok = [], True
    for m, r in results.items():
        small = r.comparisons["small"]
        allc = r.comparisons["all"]
        min_margin = float(small.margin.min()) if small.grid.size else math.nan
        dom = allc.dominance_fraction()
        ok &= small.grid.size > 0 and min_margin >= 0 and dom >= 0.8
        parts.append(f"{m}: small min margin {min_margin:+.3f}, all dominance {dom:.0%}")
    _check(6, ok, "50 scenes, T=10, 9 thetas, ~98% retained; " + "; ".join(parts), t0, 300)


def test_criterion_07_small_beats_large(filtering):
    t0 = time.perf_counter()
    _, results, _ = filtering
    parts, ok = [], True
    for m, r in results.items():
        s, l = r.improvement("small"), r.improvement("large")
        ok &= s > l
        parts.append(f"{m}: small {s:+.4f} vs large {l:+.4f}")
    _check(7, ok, "; ".join(parts), t0)


def test_criterion_08_entropy_mi_concordance(filtering):
    t0 = time.perf_counter()
    scans, _, _ = filtering
    h = np.concatenate([s.raw_lesion_uncertainty("entropy", 0.5) for s in scans])
    mi = np.concatenate([s.raw_lesion_uncertainty("mi", 0.5) for s in scans])
    rho = float(spearmanr(h, mi).statistic)
    _check(8, rho > 0.8, f"Spearman rho {rho:.4f} over {len(h)} candidate lesions (bound 0.8)", t0)


# --- 9 -----------------------------------------------------------------------------

def test_criterion_09_gradient_check():
    t0 = time.perf_counter()
    worst, n_params = 0.0, 0
    rng = np.random.default_rng(9)
    X = rng.normal(size=(16, 9))
    y = (rng.random(16) < 0.3).astype(float)
    for form in LOSS_FORMS:
        for hidden, p in (((2,), 0.1), ((6,), 0.3), ((5, 4), 0.2)):
            net = ToyNet.init(9, hidden=hidden, dropout_p=p, seed=3, variance_bias=-1.5)
            d = draw(net, len(X), 8, Stream(5))
            _, grads = mc_loss_and_grad(net, X, y, 8, 3.0, draws=d, form=form)
            num = oracles.central_differences(
                lambda: mc_loss(net, X, y, 8, 3.0, draws=d, form=form), net.weights)
            for g, n in zip(grads, num):
                g, n = g.ravel(), np.asarray(n)
                rel = np.abs(g - n) / np.maximum(np.maximum(np.abs(g), np.abs(n)), 1e-8)
                worst = max(worst, float(rel.max()))
                n_params += g.size
    _check(9, worst < 1e-3, f"{n_params} parameters over 6 nets, max relative error {worst:.1e} (tol 1e-3)",
           t0, 10)


# --- 10 ----------------------------------------------------------------------------

def test_criterion_10_learned_variance():
    t0 = time.perf_counter()
    exp = learned_variance_experiment(seed=0)
    v_noisy, v_clean = exp.region_means(exp.stack.variances.mean(axis=0))
    mi_noisy, mi_clean = exp.region_means(mutual_information(exp.stack).values)
    _check(10, v_noisy > v_clean and mi_noisy > mi_clean,
           f"mean V noisy {v_noisy:.4f} vs clean {v_clean:.4f}; "
           f"mean MI noisy {mi_noisy:.4f} vs clean {mi_clean:.4f}", t0, 120)


# --- 11 ----------------------------------------------------------------------------

PIPELINE = [
    ["generate", "--config", "phantom.ini", "--count", "3", "--out", "gen"],
    ["uncertainty", "gen/scene_000", "gen/scene_001", "gen/scene_002", "--out", "unc"],
    ["detect", "gen/scene_000", "gen/scene_001", "gen/scene_002", "--thetas", "0.3,0.5,0.7",
     "--measures", "entropy,mi,samplevar,predvar", "--out", "det"],
    ["evaluate", "gen/scene_000", "gen/scene_001", "gen/scene_002",
     "--measures", "entropy,mi,samplevar,predvar", "--retention", "0.98", "--etas", "0.5",
     "--out", "eval"],
    ["evaluate", "gen/scene_000", "gen/scene_001", "gen/scene_002", "--level", "voxel",
     "--measures", "mi", "--etas", "0.2,0.6", "--out", "eval_voxel"],
    ["stats", "gen/scene_000", "gen/scene_001", "gen/scene_002", "--out", "stats"],
    ["train-toy", "--seed", "1", "--steps", "300", "--out", "toy"],
    ["predict-toy", "--weights", "toy/weights.tnet", "--seed", "1", "--T", "5", "--out", "pred"],
    ["uncertainty", "pred", "--out", "pred_unc"],
]


def _run_pipeline(root, monkeypatch):
    root.mkdir()
    (root / "phantom.ini").write_text(PhantomConfig(seed=11).to_text())
    monkeypatch.chdir(root)
    codes = [main(list(argv)) for argv in PIPELINE]
    files = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json":
                m = json.loads(data)
                m.pop("wall_time_s")
                data = json.dumps(m, sort_keys=True).encode()
            files[str(p.relative_to(root))] = data
    return codes, files


def test_criterion_11_cli_determinism(tmp_path, monkeypatch):
    t0 = time.perf_counter()
    codes_a, a = _run_pipeline(tmp_path / "first", monkeypatch)
    codes_b, b = _run_pipeline(tmp_path / "second", monkeypatch)
    differing = sorted(k for k in a.keys() & b.keys() if a[k] != b[k])
    missing = sorted(a.keys() ^ b.keys())
    manifests = sum(1 for k in a if k.endswith("manifest.json"))
    ok = codes_a == codes_b == [0] * len(PIPELINE) and not differing and not missing
    _check(11, ok,
           f"{len(PIPELINE)} commands run twice, {len(a)} files compared ({manifests} manifests "
           f"minus wall time), {len(differing)} differ, {len(missing)} unmatched"
           + (f" (first: {(differing + missing)[0]})" if differing or missing else ""), t0)
