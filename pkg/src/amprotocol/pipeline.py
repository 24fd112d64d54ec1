"""End-to-end stages over an output directory, and the simulator closed loop.

Each stage reads what its predecessors wrote, writes its own files, and
records their content hashes in ``manifest.json``. Wall-clock timings go
to ``timings.json`` so the manifest itself stays reproducible.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrology, phantom, predictor, recommend, segment
from .phantom import ProcessParams
from .voxelcore import Label, read_grid, write_grid

log = logging.getLogger("amprotocol")

STAGES = ("phantom", "train-seg", "segment", "analyze", "train-ann", "recommend", "report")
_STREAM = {"phantom": 1, "train-seg": 2, "train-ann": 3}


class StageDependencyError(RuntimeError):
    def __init__(self, path, stage):
        super().__init__(f"missing input {path} (run the '{stage}' stage first)")
        self.path = path
        self.stage = stage


def derive_seed(seed, *keys):
    """Independent 63-bit seed for a sub-task, fixed by ``seed`` and ``keys``."""
    state = np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(2, np.uint64)
    return int(state[0] >> np.uint64(1))


# ------------------------------------------------------------ config views


def designs_from(cfg):
    d = cfg["design"]
    build = {"D1": lambda: phantom.design_d1(d["d1_height"]), "D2": lambda: phantom.design_d2(d["d2_height"])}
    return {name: build[name]() for name in d["designs"]}


def defect_model_from(cfg):
    d = cfg["defects"]
    return phantom.DefectModel(
        optimal_height={p: d[f"optimal_height_{p}"] for p in phantom.PRINTERS},
        baseline={p: d[f"baseline_{p}"] for p in phantom.PRINTERS},
        height_slope=d["height_slope"],
        speed_slope=d["speed_slope"],
        distortion=d["distortion"],
        noise_sigma=d["noise_sigma"],
        blur_radius=d["blur_radius"],
    )


def space_from(cfg):
    s = cfg["space"]
    return recommend.ParamSpace(s["layer_heights"], s["nozzle_speeds"], s["infill_densities"], s["printers"])


def mlp_config_from(cfg, seed):
    t = cfg["training"]
    return predictor.MLPTrainConfig(
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        lr_increase=t["lr_increase"],
        lr_decrease=t["lr_decrease"],
        max_perf_increase=t["max_perf_increase"],
        epochs=t["epochs"],
        fractions=t["fractions"],
        seed=seed,
        hidden=t["hidden"],
    )


# --------------------------------------------------------------- samples


@dataclass(frozen=True)
class Sample:
    id: str
    design: str
    params: ProcessParams
    replicate: int
    seed: int


def plan_samples(cfg, seed):
    d = cfg["design"]
    out = []
    for design in d["designs"]:
        for printer in d["printers"]:
            for h, s in d["settings"]:
                for r in range(d["replicates"]):
                    name = f"{design}_h{h:g}_s{s:g}_p{printer}" + (f"_r{r}" if d["replicates"] > 1 else "")
                    p = ProcessParams(h, s, 100.0, printer)
                    out.append(Sample(name, design, p, r, derive_seed(seed, _STREAM["phantom"], len(out))))
    return out


_PARAM_COLS = ["layer_height_um", "nozzle_speed_mm_s", "infill_pct", "printer"]


def _param_cells(p):
    h, s, i, c = p.as_tuple()
    return [repr(h), repr(s), repr(i), c]


def _params_from(rec):
    return ProcessParams(
        float(rec["layer_height_um"]), float(rec["nozzle_speed_mm_s"]), float(rec["infill_pct"]), int(rec["printer"])
    )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------- run


class Run:
    """One output directory plus the configuration and seed that fill it."""

    def __init__(self, cfg, seed=0, root=None):
        self.cfg = cfg
        self.seed = int(seed)
        self.root = Path(root if root is not None else cfg["paths"]["out"])

    def path(self, rel):
        return self.root / rel

    def require(self, rel, stage):
        p = self.path(rel)
        if not p.exists():
            raise StageDependencyError(str(p), stage)
        return p

    def prepare(self, *dirs):
        for d in ("",) + dirs:
            self.path(d).mkdir(parents=True, exist_ok=True)

    def _load(self, name, empty):
        p = self.path(name)
        return json.loads(p.read_text()) if p.exists() else empty

    def record(self, stage, files, seconds):
        """Add a finished stage and the hashes of its files to the manifest."""
        manifest = self._load("manifest.json", {})
        if manifest.get("config_sha256") != self.cfg.digest or manifest.get("seed") != self.seed:
            manifest = {"config_sha256": self.cfg.digest, "seed": self.seed, "stages": {}}
        manifest["stages"][stage] = {
            str(Path(f).relative_to(self.root).as_posix()): _sha256(f) for f in sorted(set(map(Path, files)))
        }
        _write_json(self.path("manifest.json"), manifest)
        timings = self._load("timings.json", {})
        timings[stage] = round(seconds, 3)
        _write_json(self.path("timings.json"), timings)

    def samples(self):
        rows = _read_csv(self.require("samples.csv", "phantom"))
        return rows


def stage_phantom(run):
    cfg = run.cfg
    run.prepare("volumes", "truth")
    designs = designs_from(cfg)
    model = defect_model_from(cfg)
    pitch = cfg["design"]["pitch"]
    files, rows = [], []
    config_copy = run.path("config.ini")
    config_copy.write_text(cfg.text)
    files.append(config_copy)
    for s in plan_samples(cfg, run.seed):
        spec = designs[s.design]
        grid, mask = phantom.simulate_print(spec, s.params, model, pitch=pitch, seed=s.seed)
        vol, truth = run.path(f"volumes/{s.id}.amvx"), run.path(f"truth/{s.id}.amvx")
        write_grid(grid, vol)
        write_grid(mask, truth)
        files += [vol, truth]
        rows.append(
            [s.id, s.design] + _param_cells(s.params) + [s.replicate, s.seed]
            + [repr(phantom.designed_porosity(spec)), repr(phantom.true_porosity(spec, s.params, model))]
        )
        log.info("phantom %s", s.id)
    header = ["id", "design"] + _PARAM_COLS + ["replicate", "seed", "designed_pct", "true_pct"]
    _write_csv(run.path("samples.csv"), header, rows)
    files.append(run.path("samples.csv"))
    return files


def _crop_dataset(run, samples, n, size, rng):
    """XY training crops, each centred (where the edges allow) on a random pore voxel."""
    cache = {}

    def load(sid):
        if sid not in cache:
            grid = read_grid(run.require(f"volumes/{sid}.amvx", "phantom"))
            truth = read_grid(run.require(f"truth/{sid}.amvx", "phantom"))
            cache[sid] = (grid.values, truth.labels, np.argwhere(truth.labels == Label.PORE))
        return cache[sid]

    images = np.empty((n, size, size))
    masks = np.empty((n, size, size), dtype=np.uint8)
    for k in range(n):
        values, labels, pores = load(samples[rng.integers(len(samples))]["id"])
        nx, ny, _ = values.shape
        if nx < size or ny < size:
            raise ValueError(f"crop size {size} exceeds the slice size {(nx, ny)}")
        if len(pores) == 0:
            raise ValueError("cannot draw segmentation crops from a sample without pores")
        x, y, z = pores[rng.integers(len(pores))]
        x0 = int(np.clip(x - size // 2, 0, nx - size))
        y0 = int(np.clip(y - size // 2, 0, ny - size))
        images[k] = values[x0 : x0 + size, y0 : y0 + size, z]
        masks[k] = labels[x0 : x0 + size, y0 : y0 + size, z] == Label.PORE
    return images, masks


def stage_train_seg(run):
    s = run.cfg["segmentation"]
    samples = run.samples()
    if s["method"] == "threshold":
        log.info("train-seg: threshold method, nothing to train")
        return []
    run.prepare("seg")
    rng = np.random.default_rng(derive_seed(run.seed, _STREAM["train-seg"]))
    images, masks = _crop_dataset(run, samples, s["crops"], s["crop_size"], rng)
    net_cfg = segment.SegNetConfig(
        depth=s["depth"], base_channels=s["base_channels"], input_size=s["crop_size"], threshold=s["threshold"]
    )
    net = segment.segnet_init(net_cfg, seed=derive_seed(run.seed, _STREAM["train-seg"], 1))
    train_cfg = segment.SegTrainConfig(
        batch_size=s["batch_size"],
        epochs=s["epochs"],
        train_fraction=s["train_fraction"],
        learning_rate=s["learning_rate"],
        seed=derive_seed(run.seed, _STREAM["train-seg"], 2),
    )

    def progress(epoch, hist):
        log.info("train-seg epoch %d loss %.4f acc %.4f", epoch, hist.loss[-1], hist.acc[-1])

    net, history = segment.segnet_train(net, segment.to_channels(images, net_cfg.in_channels), masks, train_cfg, progress)
    segment.save_segnet(net, run.path("seg/segnet.txt"))
    history.write_csv(run.path("seg/history.csv"))
    return [run.path("seg/segnet.txt"), run.path("seg/history.csv")]


def stage_segment(run):
    s = run.cfg["segmentation"]
    samples = run.samples()
    net = None
    if s["method"] == "net":
        net = segment.load_segnet(run.require("seg/segnet.txt", "train-seg"))
    run.prepare("segmented")
    files, rows = [], []
    for rec in samples:
        grid = read_grid(run.require(f"volumes/{rec['id']}.amvx", "phantom"))
        truth = read_grid(run.require(f"truth/{rec['id']}.amvx", "phantom"))
        mask = segment.threshold_volume(grid) if net is None else segment.segnet_volume(net, grid, s["threshold"])
        out = run.path(f"segmented/{rec['id']}.amvx")
        write_grid(mask, out)
        files.append(out)
        agree = float(np.mean(mask.labels == truth.labels))
        rows.append(
            [rec["id"], rec["design"]] + [rec[c] for c in _PARAM_COLS]
            + [repr(metrology.porosity(mask).phi), repr(metrology.porosity(truth).phi), rec["designed_pct"], repr(agree)]
        )
        log.info("segment %s", rec["id"])
    header = ["id", "design"] + _PARAM_COLS + ["measured_pct", "truth_pct", "designed_pct", "voxel_agreement"]
    _write_csv(run.path("porosity.csv"), header, rows)
    return files + [run.path("porosity.csv")]


def _bin_names(edges):
    names = [f"<{edges[0]:g}"]
    names += [f"{a:g}-{b:g}" for a, b in zip(edges[:-1], edges[1:])]
    return names + [f">={edges[-1]:g}"]


def stage_analyze(run):
    h = run.cfg["histogram"]
    samples = _read_csv(run.require("porosity.csv", "segment"))
    run.prepare("analysis")
    voids, hist, rough = [], [], []
    for rec in samples:
        mask = read_grid(run.require(f"segmented/{rec['id']}.amvx", "segment"))
        stats = metrology.connected_components(mask, h["connectivity"])
        d = [c.diameter for c in stats.components]
        voids.append(
            [rec["id"], len(d), repr(stats.total_volume)]
            + ([repr(float(np.mean(d))), repr(float(np.max(d)))] if d else ["nan", "nan"])
        )
        hist.append([rec["id"]] + [int(v) for v in metrology.size_histogram(stats, h["edges"])])
        for plane in ("XY", "XZ"):
            summary = metrology.roughness_summary(mask, plane)
            five = [repr(summary.ra[k]) for k in ("min", "q1", "median", "q3", "max")]
            five += [repr(summary.rsk[k]) for k in ("min", "q1", "median", "q3", "max")]
            rough.append([rec["id"], plane, summary.n] + five)
        log.info("analyze %s", rec["id"])
    _write_csv(run.path("analysis/voids.csv"), ["id", "n_voids", "void_volume_mm3", "mean_diameter_mm", "max_diameter_mm"], voids)
    _write_csv(run.path("analysis/histogram.csv"), ["id"] + _bin_names(h["edges"]), hist)
    stats_cols = [f"{m}_{k}" for m in ("ra_um", "rsk") for k in ("min", "q1", "median", "q3", "max")]
    _write_csv(run.path("analysis/roughness.csv"), ["id", "plane", "sections"] + stats_cols, rough)
    return [run.path(f"analysis/{n}.csv") for n in ("voids", "histogram", "roughness")]


def _table_rows(run):
    design = run.cfg["training"]["design"]
    out = []
    for rec in _read_csv(run.require("porosity.csv", "segment")):
        if rec["design"] == design:
            out.append(predictor.SampleRow(_params_from(rec), float(rec["measured_pct"])))
    if not out:
        raise ValueError(f"no segmented samples of design {design}")
    return out


def _r_or_none(pred, rows):
    try:
        return predictor.correlation_r(pred, [r.porosity for r in rows])
    except (ValueError, predictor.UndefinedCorrelation):
        return None


def stage_train_ann(run):
    t = run.cfg["training"]
    rows = _table_rows(run)
    run.prepare("ann")
    predictor.write_table(rows, run.path("ann/table.csv"))
    cfg = mlp_config_from(run.cfg, derive_seed(run.seed, _STREAM["train-ann"]))
    ens, results = predictor.train_ensemble(rows, cfg, t["restarts"], t["restore_best"])
    files = [run.path("ann/table.csv")]
    for k, res in enumerate(results):
        predictor.save_model(res.model, run.path(f"ann/model_{k}.mlp"))
        res.history.write_csv(run.path(f"ann/history_{k}.csv"))
        files += [run.path(f"ann/model_{k}.mlp"), run.path(f"ann/history_{k}.csv")]
    part = results[0]
    metrics = {"members": len(results), "rows": len(rows)}
    for name, subset in (("train", part.train), ("val", part.val), ("test", part.test), ("all", rows)):
        if not subset:
            continue
        pred = predictor.forward(ens, [r.params for r in subset])
        metrics[name] = {
            "n": len(subset),
            "mse_pct2": predictor.mse(pred, [r.porosity for r in subset]),
            "r": _r_or_none(pred, subset),
        }
    metrics["final_train_mse_scaled"] = [res.history.train_mse[-1] for res in results]
    metrics["best_epoch"] = [res.history.best_epoch for res in results]
    _write_json(run.path("ann/metrics.json"), metrics)
    log.info("train-ann: %d members, train R %s", len(results), metrics["train"]["r"])
    return files + [run.path("ann/metrics.json")]


def load_ensemble(run):
    first = run.require("ann/model_0.mlp", "train-ann")
    models, k = [], 0
    while run.path(f"ann/model_{k}.mlp").exists():
        models.append(predictor.load_model(run.path(f"ann/model_{k}.mlp")))
        k += 1
    log.debug("loaded %d models starting at %s", len(models), first)
    return predictor.Ensemble(tuple(models))


def stage_recommend(run, designed=None, top_k=None):
    s = run.cfg["space"]
    ens = load_ensemble(run)
    design_name = run.cfg["training"]["design"]
    spec = designs_from(run.cfg)[design_name]
    if designed is None:
        designed = s["designed"] if s["designed"] is not None else phantom.designed_porosity(spec)
    rec = recommend.recommend(ens, space_from(run.cfg), designed, top_k or s["top_k"])
    run.prepare("recommend")
    rec.write_csv(run.path("recommend/scores.csv"))
    rec.write_json(run.path("recommend/summary.json"))
    report = recommend.evaluate(rec, spec, defect_model_from(run.cfg))
    _write_json(run.path("recommend/closed_loop.json"), loop_summary(report))
    log.info("recommend: %s predicted %.4f%%", rec.best.params.as_tuple(), rec.best.predicted)
    return [run.path(f"recommend/{n}") for n in ("scores.csv", "summary.json", "closed_loop.json")]


def loop_summary(report):
    return {
        "designed_pct": report.designed,
        "winner": list(report.winner.as_tuple()),
        "winner_true_pct": report.winner_true,
        "deviation_pct": report.deviation,
        "relative_error": report.relative_error,
        "true_best": list(report.true_best.as_tuple()),
        "true_best_deviation_pct": report.true_best_deviation,
        "matches_true_best": report.matches,
    }


def _porosity_by_printer(rows):
    """Mean measured porosity per (design, height, speed) row and printer column."""
    printers = sorted({int(r["printer"]) for r in rows})
    groups = {}
    for r in rows:
        key = (r["design"], float(r["layer_height_um"]), float(r["nozzle_speed_mm_s"]))
        groups.setdefault(key, {}).setdefault(int(r["printer"]), []).append(float(r["measured_pct"]))
        groups[key]["designed"] = float(r["designed_pct"])
    table = []
    for key in sorted(groups):
        g = groups[key]
        cells = {p: float(np.mean(g[p])) if p in g else None for p in printers}
        table.append({"design": key[0], "layer_height_um": key[1], "nozzle_speed_mm_s": key[2], "designed_pct": g["designed"], "printers": cells})
    return printers, table


def stage_report(run):
    por = _read_csv(run.require("porosity.csv", "segment"))
    rough = _read_csv(run.require("analysis/roughness.csv", "analyze"))
    metrics = json.loads(run.require("ann/metrics.json", "train-ann").read_text())
    scores = _read_csv(run.require("recommend/scores.csv", "recommend"))
    loop = json.loads(run.require("recommend/closed_loop.json", "recommend").read_text())
    run.prepare("report")
    files = []

    printers, table = _porosity_by_printer(por)
    _write_csv(
        run.path("report/porosity_by_printer.csv"),
        ["design", "layer_height_um", "nozzle_speed_mm_s", "designed_pct"] + [f"printer_{p}_pct" for p in printers],
        [
            [t["design"], repr(t["layer_height_um"]), repr(t["nozzle_speed_mm_s"]), repr(t["designed_pct"])]
            + ["" if t["printers"][p] is None else repr(t["printers"][p]) for p in printers]
            for t in table
        ],
    )
    _write_json(run.path("report/porosity_by_printer.json"), {"printers": printers, "rows": table})
    files += [run.path("report/porosity_by_printer.csv"), run.path("report/porosity_by_printer.json")]

    meta = {r["id"]: r for r in por}
    box_cols = [c for c in rough[0] if c not in ("id", "plane", "sections")] if rough else []
    box_rows = [
        [meta[r["id"]]["design"], meta[r["id"]]["printer"], r["plane"], r["id"]] + [r[c] for c in box_cols] for r in rough
    ]
    _write_csv(run.path("report/roughness_boxplot.csv"), ["design", "printer", "plane", "id"] + box_cols, box_rows)
    grouped = {}
    for r in rough:
        key = f"{meta[r['id']]['design']}/printer_{meta[r['id']]['printer']}/{r['plane']}"
        grouped.setdefault(key, []).append({"id": r["id"], **{c: float(r[c]) for c in box_cols}})
    _write_json(run.path("report/roughness_boxplot.json"), grouped)
    files += [run.path("report/roughness_boxplot.csv"), run.path("report/roughness_boxplot.json")]

    seg_hist = run.path("seg/history.csv")
    if seg_hist.exists():
        run.path("report/seg_history.csv").write_bytes(seg_hist.read_bytes())
        files.append(run.path("report/seg_history.csv"))
    hist_rows, k = [], 0
    while run.path(f"ann/history_{k}.csv").exists():
        hist_rows += [[k] + list(r.values()) for r in _read_csv(run.path(f"ann/history_{k}.csv"))]
        k += 1
    _write_csv(run.path("report/ann_history.csv"), ["member", "epoch", "train_mse", "val_mse", "lr"], hist_rows)
    files.append(run.path("report/ann_history.csv"))

    best = {}
    for r in scores:
        best.setdefault(int(r["printer"]), r)  # scores are ranked, so the first per printer is its best
    designed = loop["designed_pct"]
    rec_rows = [
        [p] + [best[p][c] for c in ("layer_height_um", "nozzle_speed_mm_s", "infill_pct", "predicted_pct")] + [repr(designed), best[p]["deviation_pct"]]
        for p in sorted(best)
    ]
    rec_header = ["printer", "layer_height_um", "nozzle_speed_mm_s", "infill_pct", "predicted_pct", "designed_pct", "deviation_pct"]
    _write_csv(run.path("report/recommendation.csv"), rec_header, rec_rows)
    _write_json(run.path("report/recommendation.json"), [dict(zip(rec_header, row)) for row in rec_rows])
    files += [run.path("report/recommendation.csv"), run.path("report/recommendation.json")]

    _write_json(run.path("report/summary.json"), {"predictor": metrics, "closed_loop": loop, "samples": len(por)})
    files.append(run.path("report/summary.json"))
    return files


STAGE_FUNCS = {
    "phantom": stage_phantom,
    "train-seg": stage_train_seg,
    "segment": stage_segment,
    "analyze": stage_analyze,
    "train-ann": stage_train_ann,
    "recommend": stage_recommend,
    "report": stage_report,
}


def run_stage(run, stage, **kwargs):
    t0 = time.perf_counter()
    files = STAGE_FUNCS[stage](run, **kwargs)
    run.record(stage, files, time.perf_counter() - t0)
    return files


def run_all(run):
    for stage in STAGES:
        run_stage(run, stage)


# ------------------------------------------------------------ closed loop


@dataclass
class LoopResult:
    report: recommend.LoopReport
    recommendation: recommend.Recommendation
    rows: list
    ensemble: predictor.Ensemble


def closed_loop(
    design,
    defect_model,
    seed,
    space=None,
    settings=recommend.REFERENCE_PAIRS,
    printers=phantom.PRINTERS,
    replicates=4,
    restarts=5,
    pitch=phantom.DEFAULT_PITCH,
    epochs=5000,
):
    """Print, measure, learn and recommend against the simulator's ground truth.

    Every (setting, printer) pair is printed ``replicates`` times with its
    own seed and measured by threshold segmentation. An ensemble of
    ``restarts`` networks is trained on the table, queried over ``space``
    and its winner scored against the true porosity.
    """
    space = space or recommend.ParamSpace()
    rows = []
    k = 0
    for r in range(replicates):
        for printer in printers:
            for h, s in settings:
                p = ProcessParams(h, s, 100.0, printer)
                grid, _ = phantom.simulate_print(design, p, defect_model, pitch=pitch, seed=derive_seed(seed, 1, k))
                rows.append(predictor.SampleRow(p, metrology.porosity(segment.threshold_volume(grid)).phi))
                k += 1
    cfg = predictor.MLPTrainConfig(epochs=epochs, seed=derive_seed(seed, 3))
    ens, _ = predictor.train_ensemble(rows, cfg, restarts)
    rec = recommend.recommend(ens, space, phantom.designed_porosity(design))
    return LoopResult(recommend.evaluate(rec, design, defect_model, space), rec, rows, ens)
