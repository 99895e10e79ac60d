"""Independent reference implementations used as test oracles.

Nothing here imports the package.  Measures are evaluated one voxel at a
time with mpmath at 50 digits; components use breadth-first search over
explicit neighbour lists; matching uses plain set intersections.
"""
from collections import deque
import itertools

import mpmath

NEIGHBOURS = [d for d in itertools.product((-1, 0, 1), repeat=3)
              if 0 < abs(d[0]) + abs(d[1]) + abs(d[2]) <= 2]


def _h(p):
    p = mpmath.mpf(p)
    out = mpmath.mpf(0)
    for q in (p, 1 - p):
        if q > 0:
            out -= q * mpmath.log(q)
    return out


def mp_entropy(ps):
    with mpmath.workdps(50):
        return float(_h(mpmath.fsum(ps) / len(ps)))


def mp_mutual_information(ps):
    with mpmath.workdps(50):
        mean = mpmath.fsum(ps) / len(ps)
        return float(_h(mean) - mpmath.fsum(_h(p) for p in ps) / len(ps))


def mp_sample_variance(ps):
    with mpmath.workdps(50):
        mean = mpmath.fsum(ps) / len(ps)
        return float(mpmath.fsum((mpmath.mpf(p) - mean) ** 2 for p in ps) / len(ps))


def mp_predictive_variance(vs):
    with mpmath.workdps(50):
        return float(mpmath.fsum(vs) / len(vs))


def flat(c, dims):
    return c[0] + dims[0] * (c[1] + dims[1] * c[2])


def inside(c, dims):
    return all(0 <= c[i] < dims[i] for i in range(3))


def bfs_components(voxels, dims):
    """Components of a voxel set, each a set, ordered by smallest flat index."""
    todo = set(voxels)
    comps = []
    for start in sorted(todo, key=lambda c: flat(c, dims)):
        if start not in todo:
            continue
        todo.discard(start)
        comp, queue = {start}, deque([start])
        while queue:
            x, y, z = queue.popleft()
            for dx, dy, dz in NEIGHBOURS:
                n = (x + dx, y + dy, z + dz)
                if n in todo:
                    todo.discard(n)
                    comp.add(n)
                    queue.append(n)
        comps.append(comp)
    return comps


def grow(voxels, dims):
    out = set(voxels)
    for x, y, z in voxels:
        for dx, dy, dz in NEIGHBOURS:
            n = (x + dx, y + dy, z + dz)
            if inside(n, dims):
                out.add(n)
    return out


def candidate_reach(cands, dims):
    """Grown union of all candidates, and each candidate grown on its own."""
    union = set().union(*cands) if cands else set()
    return grow(union, dims), [grow(c, dims) for c in cands]


def match_with_reach(gt, cands, reach, grown):
    gt_status = []
    for g in gt:
        k = len(g & reach)
        gt_status.append("detected" if k >= 3 or 2 * k > len(g) else "missed")
    all_gt = set().union(*gt) if gt else set()
    cand_status = []
    for c, gc in zip(cands, grown):
        if gc & all_gt:
            cand_status.append("matched")
        elif len(c) >= 3:
            cand_status.append("false_positive")
        else:
            cand_status.append("ignored")
    return gt_status, cand_status


def match_oracle(gt, cands, dims):
    """(gt statuses, candidate statuses) for lists of voxel sets."""
    return match_with_reach(gt, cands, *candidate_reach(cands, dims))


def central_differences(f, params, h=1e-5):
    """Central-difference gradient of ``f()`` with respect to every entry of
    every array in ``params``, perturbed in place and restored."""
    grads = []
    for p in params:
        g = [0.0] * p.size
        flat_view = p.reshape(-1)
        for i in range(p.size):
            old = flat_view[i]
            flat_view[i] = old + h
            up = f()
            flat_view[i] = old - h
            down = f()
            flat_view[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def neighbour_bits(dims):
    """Per flat cell, an int whose set bits are its in-bounds neighbours."""
    cells = list(itertools.product(*(range(d) for d in reversed(dims))))
    out = [0] * len(cells)
    for z, y, x in cells:
        c = (x, y, z)
        for dx, dy, dz in NEIGHBOURS:
            n = (x + dx, y + dy, z + dz)
            if inside(n, dims):
                out[flat(c, dims)] |= 1 << flat(n, dims)
    return out


def bitmask_components(mask, nbr):
    """Flood fill on an int bit set; components ordered by lowest bit."""
    comps, rest = [], mask
    while rest:
        comp = frontier = rest & -rest
        while frontier:
            reach, f = 0, frontier
            while f:
                b = f & -f
                reach |= nbr[b.bit_length() - 1]
                f ^= b
            frontier = reach & rest & ~comp
            comp |= frontier
        comps.append(comp)
        rest &= ~comp
    return comps
