"""Independent oracles and generators shared by the tests."""
from collections import deque

import numpy as np

from amprotocol.metrology import label_pores
from amprotocol.phantom import DefectModel, DesignSpec, InvalidSpec, ProcessParams, cuboid, design_d1, sphere, reference_params, true_porosity
from amprotocol.predictor import SampleRow
from amprotocol.segment import _forward, bce_loss

PITCH = 0.05


def random_spec(rng, max_voids=4):
    """Outer faces on the 0.05 mm lattice, up to ``max_voids`` non-overlapping voids."""
    outer = tuple(float(v) for v in rng.integers(30, 61, size=3) * PITCH)
    voids = []
    for _ in range(8 * max_voids):
        if len(voids) == max_voids:
            break
        if rng.random() < 0.5:
            size = tuple(rng.uniform(0.2, 0.8, size=3))
            half = np.array(size) / 2
            v = lambda c: cuboid(*size, c)
        else:
            d = rng.uniform(0.2, 0.8)
            half = np.full(3, d / 2)
            v = lambda c: sphere(d, c)
        lo, hi = half + 0.05, np.array(outer) - half - 0.05
        if np.any(hi <= lo):
            continue
        candidate = v(tuple(rng.uniform(lo, hi)))
        try:
            DesignSpec(outer, tuple(voids) + (candidate,))
        except InvalidSpec:
            continue
        voids.append(candidate)
    return DesignSpec(outer, tuple(voids), "random")


def synthetic_table(design=None, model=None):
    """20 rows of true porosity: the 18 reference settings plus two fast-nozzle cells."""
    design = design_d1() if design is None else design
    model = DefectModel() if model is None else model
    params = reference_params() + [ProcessParams(60, 35, 100, 31), ProcessParams(55, 35, 100, 21)]
    return [SampleRow(p, true_porosity(design, p, model)) for p in params]


def activation_pattern(net, x):
    """ReLU on/off masks and pool winners; the loss is smooth while these hold."""
    _, cache = _forward(net, x)
    return [e[4] if e[0] == "conv" else e[2] for e in cache if e[0] in ("conv", "pool")]


def _same(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def gradient_check(net, x, y, eps=1e-4):
    """Worst relative error over every parameter, and the number of kink crossings.

    A parameter whose +-eps step changes the activation pattern has no
    meaningful central difference; it is counted, not compared.
    """
    _, grads, _ = bce_loss(net, x, y)
    base = activation_pattern(net, x)
    worst, kinks, checked = 0.0, 0, 0
    for name, arr in net.params.items():
        for i in range(arr.size):
            old = arr.flat[i]
            arr.flat[i] = old + eps
            lp = bce_loss(net, x, y)[0]
            smooth = _same(base, activation_pattern(net, x))
            arr.flat[i] = old - eps
            lm = bce_loss(net, x, y)[0]
            smooth = smooth and _same(base, activation_pattern(net, x))
            arr.flat[i] = old
            if not smooth:
                kinks += 1
                continue
            num, ana = (lp - lm) / (2 * eps), grads[name].flat[i]
            worst = max(worst, abs(num - ana) / (max(abs(num), abs(ana)) + 1e-8))
            checked += 1
    return worst, kinks, checked


def flood_fill_partition(pores, connectivity):
    """Independent BFS labelling; returns the set of components as frozensets of voxels."""
    if connectivity == 6:
        steps = [s for s in np.ndindex(3, 3, 3) if sum(abs(v - 1) for v in s) == 1]
    else:
        steps = [s for s in np.ndindex(3, 3, 3) if s != (1, 1, 1)]
    steps = [tuple(v - 1 for v in s) for s in steps]
    seen = np.zeros(pores.shape, bool)
    parts = set()
    for start in zip(*np.nonzero(pores)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(v)
            for d in steps:
                n = tuple(a + b for a, b in zip(v, d))
                if all(0 <= n[i] < pores.shape[i] for i in range(3)) and pores[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        parts.add(frozenset(comp))
    return parts


def labelled_partition(mask, connectivity):
    labels, _ = label_pores(mask, connectivity)
    return {frozenset(zip(*np.nonzero(labels == k))) for k in range(1, labels.max() + 1)}
