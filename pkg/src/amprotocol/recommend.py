"""Choose the printer setting whose predicted porosity is closest to the design."""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field

from .phantom import PRINTERS, ProcessParams, designed_porosity, true_porosity
from .predictor import Ensemble, MLPModel, forward


@dataclass(frozen=True)
class ParamSpace:
    """Candidate grid. ``pairs`` optionally replaces the (height, speed) product."""

    layer_heights: tuple = (50.0, 55.0, 60.0, 65.0, 70.0)
    nozzle_speeds: tuple = (30.0, 35.0)
    infill_densities: tuple = (100.0,)
    printers: tuple = PRINTERS
    pairs: tuple | None = None

    def validate(self):
        dims = {
            "layer_heights": self.layer_heights,
            "nozzle_speeds": self.nozzle_speeds,
            "infill_densities": self.infill_densities,
            "printers": self.printers,
        }
        empty = [k for k, v in dims.items() if len(v) == 0]
        if empty or (self.pairs is not None and len(self.pairs) == 0):
            raise ValueError(f"empty parameter dimension: {', '.join(empty) or 'pairs'}")

    def restrict(self, printers):
        return ParamSpace(self.layer_heights, self.nozzle_speeds, self.infill_densities, tuple(printers), self.pairs)


REFERENCE_PAIRS = ((50.0, 30.0), (55.0, 30.0), (60.0, 30.0), (65.0, 30.0), (70.0, 30.0), (50.0, 35.0))


def enumerate_space(space):
    """Every candidate setting, ordered by (height, speed, infill, printer)."""
    space.validate()
    pairs = space.pairs if space.pairs is not None else itertools.product(space.layer_heights, space.nozzle_speeds)
    out = [
        ProcessParams(float(h), float(s), float(i), int(p))
        for (h, s), i, p in itertools.product(sorted(pairs), sorted(space.infill_densities), sorted(space.printers))
    ]
    return sorted(set(out), key=lambda q: q.as_tuple())


def _rank_key(params, deviation):
    h, s, i, p = params.as_tuple()
    return (deviation, h, s, p, i)


@dataclass(frozen=True)
class Candidate:
    params: ProcessParams
    predicted: float
    deviation: float


@dataclass
class Recommendation:
    designed: float
    table: list
    top_k: int = 1

    @property
    def best(self):
        return self.table[0]

    @property
    def top(self):
        return self.table[: self.top_k]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "layer_height_um", "nozzle_speed_mm_s", "infill_pct", "printer", "predicted_pct", "deviation_pct"])
            for k, c in enumerate(self.table, start=1):
                h, s, i, p = c.params.as_tuple()
                w.writerow([k, repr(h), repr(s), repr(i), p, repr(c.predicted), repr(c.deviation)])

    def summary(self):
        return {
            "designed_pct": self.designed,
            "winner": _params_dict(self.best.params),
            "predicted_pct": self.best.predicted,
            "deviation_pct": self.best.deviation,
            "top": [
                {**_params_dict(c.params), "predicted_pct": c.predicted, "deviation_pct": c.deviation} for c in self.top
            ],
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _params_dict(p):
    h, s, i, c = p.as_tuple()
    return {"layer_height_um": h, "nozzle_speed_mm_s": s, "infill_pct": i, "printer": c}


def _predict_all(model, candidates):
    if isinstance(model, (MLPModel, Ensemble)):
        return [float(v) for v in forward(model, candidates)]
    return [float(model(p)) for p in candidates]


def recommend(model, space, designed, top_k=1):
    """Rank every candidate by |predicted - designed| porosity.

    ``model`` is a trained :class:`MLPModel`, an :class:`Ensemble`, or any
    callable mapping :class:`ProcessParams` to percent. Ties go to the
    lower layer height, then nozzle speed, then printer code.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not 0.0 <= designed <= 100.0:
        raise ValueError(f"designed porosity must lie in [0, 100], got {designed}")
    cands = enumerate_space(space)
    preds = _predict_all(model, cands)
    table = [Candidate(p, y, abs(y - designed)) for p, y in zip(cands, preds)]
    table.sort(key=lambda c: _rank_key(c.params, c.deviation))
    return Recommendation(float(designed), table, top_k)


@dataclass(frozen=True)
class LoopReport:
    winner: ProcessParams
    winner_true: float
    designed: float
    deviation: float
    relative_error: float
    true_best: ProcessParams
    true_best_deviation: float
    matches: bool
    true_table: list = field(default_factory=list, repr=False)


def evaluate(recommendation, design, defect_model, space=None):
    """Score a recommendation against the simulator's true porosity.

    The true optimum is found by exhaustive scan of ``space`` (default:
    the recommendation's own candidates) with the same tie-break.
    """
    designed = designed_porosity(design)
    cands = enumerate_space(space) if space is not None else [c.params for c in recommendation.table]
    truth = [(p, true_porosity(design, p, defect_model)) for p in cands]
    ranked = sorted(truth, key=lambda t: _rank_key(t[0], abs(t[1] - designed)))
    winner = recommendation.best.params
    wtrue = true_porosity(design, winner, defect_model)
    return LoopReport(
        winner=winner,
        winner_true=wtrue,
        designed=designed,
        deviation=abs(wtrue - designed),
        relative_error=abs(wtrue - designed) / designed if designed else float("inf"),
        true_best=ranked[0][0],
        true_best_deviation=abs(ranked[0][1] - designed),
        matches=winner == ranked[0][0],
        true_table=ranked,
    )
