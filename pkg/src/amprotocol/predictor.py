"""Feed-forward porosity predictor: process parameters in, porosity out.

Four inputs (layer height, nozzle speed, infill density, printer code),
one log-sigmoid hidden layer, one tanh output unit. Inputs and target are
min-max scaled to [-1, 1]; the loss is the mean squared error in that
scaled space.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .phantom import ProcessParams

N_INPUTS = 4
COLUMNS = ("layer_height_um", "nozzle_speed_mm_s", "infill_pct", "printer", "porosity_pct")


class DegenerateRange(ValueError):
    pass


class ModelNotReady(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch):
        super().__init__(f"training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class SampleRow:
    params: ProcessParams
    porosity: float

    def __post_init__(self):
        if not 0.0 <= self.porosity <= 100.0:
            raise ValueError(f"porosity must lie in [0, 100], got {self.porosity}")


# ------------------------------------------------------------ normalization


def normalize(values, lo=None, hi=None, allow_constant=False):
    """Map each column affinely onto [-1, 1] over ``[lo, hi]``.

    Ranges default to the column min/max. A constant column raises
    :class:`DegenerateRange` unless ``allow_constant``, in which case it
    maps to 0 with a warning. Returns ``(scaled, lo, hi)``.
    """
    v = np.asarray(values, dtype=np.float64)
    lo = v.min(axis=0) if lo is None else np.asarray(lo, dtype=np.float64)
    hi = v.max(axis=0) if hi is None else np.asarray(hi, dtype=np.float64)
    span = hi - lo
    flat = np.atleast_1d(span <= 0)
    if flat.any():
        if not allow_constant:
            raise DegenerateRange(f"columns {np.flatnonzero(flat).tolist()} have an empty range")
        warnings.warn(f"constant input columns {np.flatnonzero(flat).tolist()} are mapped to 0", stacklevel=2)
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, 2.0 * (v - lo) / safe - 1.0, 0.0)
    return scaled, lo, hi


def denormalize(scaled, lo, hi):
    return (np.asarray(scaled, dtype=np.float64) + 1.0) * (np.asarray(hi) - np.asarray(lo)) / 2.0 + np.asarray(lo)


# -------------------------------------------------------------------- model


def logsig(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass
class MLPModel:
    """Weights of the 4-H-1 network plus the scaling ranges.

    ``w_hidden[i, j]`` connects input ``i`` to hidden unit ``j``.
    """

    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: float
    input_lo: np.ndarray | None = None
    input_hi: np.ndarray | None = None
    output_lo: float | None = None
    output_hi: float | None = None

    @property
    def hidden(self):
        return self.w_hidden.shape[1]

    @property
    def ready(self):
        return self.input_lo is not None and self.output_lo is not None

    def vector(self):
        return np.concatenate([self.w_hidden.ravel(), self.b_hidden, self.w_out, [self.b_out]])

    def with_vector(self, theta):
        h = self.hidden
        n = N_INPUTS * h
        return replace(
            self,
            w_hidden=theta[:n].reshape(N_INPUTS, h).copy(),
            b_hidden=theta[n : n + h].copy(),
            w_out=theta[n + h : n + 2 * h].copy(),
            b_out=float(theta[-1]),
        )


def init_model(hidden=4, seed=0):
    """Uniform weights in [-0.5, 0.5] / sqrt(fan_in); biases likewise."""
    rng = np.random.default_rng(seed)
    a = 0.5 / math.sqrt(N_INPUTS)
    o = 0.5 / math.sqrt(hidden)
    return MLPModel(
        w_hidden=rng.uniform(-a, a, (N_INPUTS, hidden)),
        b_hidden=rng.uniform(-a, a, hidden),
        w_out=rng.uniform(-o, o, hidden),
        b_out=float(rng.uniform(-o, o)),
    )


def _as_inputs(params):
    if isinstance(params, ProcessParams):
        return np.array([params.as_tuple()], dtype=np.float64)
    if isinstance(params, (list, tuple)) and params and isinstance(params[0], ProcessParams):
        return np.array([p.as_tuple() for p in params], dtype=np.float64)
    x = np.asarray(params, dtype=np.float64)
    return x.reshape(-1, N_INPUTS)


def forward_scaled(model, xs):
    """Network output in scaled units for already-scaled inputs ``xs`` (N, 4)."""
    hidden = logsig(xs @ model.w_hidden + model.b_hidden)
    return np.tanh(hidden @ model.w_out + model.b_out)


def scale_inputs(model, x):
    lo, hi = model.input_lo, model.input_hi
    span = hi - lo
    reach = np.where(span > 0, span, np.maximum(np.abs(lo), 1.0)) * 0.1
    if np.any((x < lo - reach) | (x > hi + reach)):
        warnings.warn("inputs lie more than 10% outside the training range", stacklevel=3)
    return np.where(span > 0, 2.0 * (x - lo) / np.where(span > 0, span, 1.0) - 1.0, 0.0)


def forward(model, params):
    """Predicted porosity in percent for one setting or a batch.

    ``model`` may also be an :class:`Ensemble`, whose members are averaged.
    Returns a float for a single :class:`ProcessParams`, else an array.
    """
    if isinstance(model, Ensemble):
        y = np.mean([np.atleast_1d(forward(m, params)) for m in model.models], axis=0)
        return float(y[0]) if isinstance(params, ProcessParams) else y
    if not model.ready:
        raise ModelNotReady("model has no normalization ranges; train it or load a trained file")
    xs = scale_inputs(model, _as_inputs(params))
    y = denormalize(forward_scaled(model, xs), model.output_lo, model.output_hi)
    return float(y[0]) if isinstance(params, ProcessParams) else y


def mse(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size or p.size == 0:
        raise ValueError(f"mse needs equal non-empty lengths, got {p.size} and {t.size}")
    return float(np.mean((t - p) ** 2))


def loss_and_grad(model, xs, ys):
    """Scaled-space MSE and its gradient with respect to ``model.vector()``."""
    z = xs @ model.w_hidden + model.b_hidden
    h = logsig(z)
    out = np.tanh(h @ model.w_out + model.b_out)
    err = out - ys
    n = ys.size
    loss = float(np.mean(err**2))
    d_zo = 2.0 * err / n * (1.0 - out**2)
    g_wo = h.T @ d_zo
    g_bo = d_zo.sum()
    d_z = np.outer(d_zo, model.w_out) * h * (1.0 - h)
    g_w = xs.T @ d_z
    g_b = d_z.sum(axis=0)
    return loss, np.concatenate([g_w.ravel(), g_b, g_wo, [g_bo]])


def correlation_r(predictions, targets):
    """Pearson correlation coefficient."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size or p.size < 2:
        raise ValueError("correlation needs two equal-length series of at least two points")
    dp, dt = p - p.mean(), t - t.mean()
    den = math.sqrt(float(dp @ dp) * float(dt @ dt))
    if den == 0.0:
        raise UndefinedCorrelation("a series has zero variance")
    return float(dp @ dt) / den


# ----------------------------------------------------------------- training


def split(rows, fractions=(0.70, 0.15, 0.15), seed=0):
    """Seeded shuffle into (train, val, test).

    Validation and test get ``round(f * N)`` rows (at least one each),
    train takes the rest.
    """
    n = len(rows)
    if n < 3:
        raise ValueError("split needs at least three rows")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n_val = max(1, math.floor(fractions[1] * n + 0.5))
    n_test = max(1, math.floor(fractions[2] * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    n_train = n - n_val - n_test
    pick = lambda idx: [rows[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


@dataclass(frozen=True)
class MLPTrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_increase: float = 1.05
    lr_decrease: float = 0.7
    max_perf_increase: float = 1.04
    epochs: int = 1000
    fractions: tuple = (0.70, 0.15, 0.15)
    seed: int = 0
    hidden: int = 4
    goal: float = 0.0
    max_fail: int | None = None

    def validate(self):
        if min(self.learning_rate, self.lr_increase, self.lr_decrease, self.max_perf_increase) <= 0:
            raise ValueError("learning-rate factors must be positive")
        if not self.lr_decrease < 1.0 < self.lr_increase:
            raise ValueError("need lr_decrease < 1 < lr_increase")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class MLPHistory:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    stop_reason: str = ""

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_mse", "lr"])
            for k, (t, v, r) in enumerate(zip(self.train_mse, self.val_mse, self.lr), start=1):
                w.writerow([k, repr(t), repr(v), repr(r)])


@dataclass
class TrainResult:
    model: MLPModel
    history: MLPHistory
    train: list
    val: list
    test: list


def _xy(rows):
    x = np.array([r.params.as_tuple() for r in rows], dtype=np.float64).reshape(-1, N_INPUTS)
    y = np.array([r.porosity for r in rows], dtype=np.float64)
    return x, y


def fit_ranges(model, rows):
    """Attach input/output scaling ranges taken from ``rows``."""
    x, y = _xy(rows)
    _, ilo, ihi = normalize(x, allow_constant=True)
    _, olo, ohi = normalize(y)
    return replace(model, input_lo=ilo, input_hi=ihi, output_lo=float(olo), output_hi=float(ohi))


def gdx(model, xs, ys, cfg, val=None, history=None):
    """Gradient descent with momentum and an adaptive learning rate.

    Each epoch proposes ``step = m * step - (1 - m) * lr * grad``. A step
    raising the loss by more than ``max_perf_increase`` is discarded
    (momentum included) and the rate shrinks; an accepted step that
    lowers the loss grows it.
    ``val`` is an optional (xs, ys) pair used for best-epoch tracking and
    the ``max_fail`` validation stop. Returns the final model and, when
    validation data is given, the best-validation model.
    """
    history = history if history is not None else MLPHistory()
    theta = model.vector()
    perf, grad = loss_and_grad(model, xs, ys)
    lr, m = cfg.learning_rate, cfg.momentum
    step = np.zeros_like(theta)
    best = model
    fails = 0
    for epoch in range(1, cfg.epochs + 1):
        step = m * step - (1.0 - m) * lr * grad
        cand = model.with_vector(theta + step)
        new_perf, new_grad = loss_and_grad(cand, xs, ys)
        if not math.isfinite(new_perf):
            raise DivergenceError(epoch)
        if new_perf > perf * cfg.max_perf_increase:
            lr *= cfg.lr_decrease
            step = np.zeros_like(theta)
        else:
            if new_perf < perf:
                lr *= cfg.lr_increase
            theta, model, perf, grad = theta + step, cand, new_perf, new_grad
        history.train_mse.append(perf)
        history.lr.append(lr)
        if val is not None:
            vperf = mse(forward_scaled(model, val[0]), val[1])
            history.val_mse.append(vperf)
            if vperf < history.best_val:
                history.best_val, history.best_epoch, best, fails = vperf, epoch, model, 0
            else:
                fails += 1
        else:
            history.val_mse.append(math.nan)
        if perf <= cfg.goal:
            history.stop_reason = "goal"
            break
        if cfg.max_fail is not None and fails >= cfg.max_fail:
            history.stop_reason = "validation"
            break
    else:
        history.stop_reason = "epochs"
    return model, best, history


def train(rows, cfg=MLPTrainConfig(), model=None, restore_best=False):
    """Split ``rows``, fit scaling on the whole table, and train on the training part.

    With ``restore_best`` the returned model is the one from the epoch
    with the lowest validation error.
    """
    cfg.validate()
    rows = list(rows)
    tr, va, te = split(rows, cfg.fractions, cfg.seed)
    if not tr:
        raise ValueError("training split is empty")
    if model is None:
        model = init_model(cfg.hidden, cfg.seed)
    model = fit_ranges(model, rows)

    def scaled(rs):
        x, y = _xy(rs)
        return scale_inputs(model, x), normalize(y, model.output_lo, model.output_hi)[0]

    xs, ys = scaled(tr)
    val = scaled(va) if va else None
    final, best, history = gdx(model, xs, ys, cfg, val)
    return TrainResult(best if restore_best and val is not None else final, history, tr, va, te)



@dataclass(frozen=True)
class Ensemble:
    """Mean prediction of several independently initialised networks."""

    models: tuple

    def __post_init__(self):
        if not self.models:
            raise ValueError("an ensemble needs at least one model")

    def __call__(self, params):
        return forward(self, params)

    def __len__(self):
        return len(self.models)


def member_seed(seed, k):
    """Initialisation seed of ensemble member ``k``; member 0 uses ``seed`` itself."""
    return seed if k == 0 else [int(seed), int(k)]


def train_ensemble(rows, cfg=MLPTrainConfig(), restarts=5, restore_best=False):
    """Train ``restarts`` networks on one shared split; return (Ensemble, results)."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    results = [
        train(rows, cfg, init_model(cfg.hidden, member_seed(cfg.seed, k)), restore_best) for k in range(restarts)
    ]
    return Ensemble(tuple(r.model for r in results)), results


# ---------------------------------------------------------------------- I/O

MAGIC = "MLP441"


def _fmt(values):
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def save_model(model, path):
    if not model.ready:
        raise ModelNotReady("cannot save a model without normalization ranges")
    lines = [
        MAGIC,
        f"hidden {model.hidden}",
        f"input_lo {_fmt(model.input_lo)}",
        f"input_hi {_fmt(model.input_hi)}",
        f"output_range {_fmt([model.output_lo, model.output_hi])}",
    ]
    lines += [f"w_ij {_fmt(row)}" for row in model.w_hidden]
    lines += [f"b_j {_fmt(model.b_hidden)}", f"w_o {_fmt(model.w_out)}", f"b_o {_fmt([model.b_out])}"]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: bad magic, expected {MAGIC}")
    fields = {}
    rows = []
    for line in lines[1:]:
        key, *vals = line.split()
        nums = [float(v) for v in vals]
        if key == "w_ij":
            rows.append(nums)
        else:
            fields[key] = nums
    hidden = int(fields["hidden"][0])
    w = np.array(rows)
    if w.shape != (N_INPUTS, hidden):
        raise ValueError(f"{path}: w_ij has shape {w.shape}, expected {(N_INPUTS, hidden)}")
    return MLPModel(
        w_hidden=w,
        b_hidden=np.array(fields["b_j"]),
        w_out=np.array(fields["w_o"]),
        b_out=fields["b_o"][0],
        input_lo=np.array(fields["input_lo"]),
        input_hi=np.array(fields["input_hi"]),
        output_lo=fields["output_range"][0],
        output_hi=fields["output_range"][1],
    )


def read_table(path):
    """Training table CSV -> list of :class:`SampleRow`."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            p = ProcessParams(
                float(rec["layer_height_um"]),
                float(rec["nozzle_speed_mm_s"]),
                float(rec["infill_pct"]),
                int(rec["printer"]),
            )
            out.append(SampleRow(p, float(rec["porosity_pct"])))
    return out


def write_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            h, s, i, p = r.params.as_tuple()
            w.writerow([repr(h), repr(s), repr(i), p, repr(float(r.porosity))])
