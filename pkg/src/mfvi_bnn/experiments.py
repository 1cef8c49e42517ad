"""Experiment runners behind the command-line interface.

Each runner takes a resolved config dict and an output directory, writes its
tables there and returns a JSON-ready summary. Random streams are keyed on the
config seed and the sweep-point index, so reruns are bit-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import metrics
from ._rng import stream
from .config import ConfigError
from .data import (
    Dataset,
    TeacherDistribution,
    TeacherSpec,
    load_csv_regression,
    load_idx,
    split,
    synth_blobs,
)
from .elbo import TemperatureSchedule, balance_ratio, elbo_estimate, resolve_eta
from .limit import (
    default_atom_sampler,
    f_tau_p,
    loglog_slope,
    mc_gap_estimate,
    r_tau_estimate,
    require_square_relu,
    theorem3_scaling_experiment,
)
from .model import Activation, Loss, predictive_mean, predictive_probabilities
from .trainer import (
    TrainerConfig,
    TrainingDiverged,
    initialize_posterior,
    mean_field_step_size,
    train,
)
from .variational import FactorizedGaussianPrior, VariationalPosterior, kl_total

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# output helpers


def fmt(value) -> str:
    """Deterministic CSV cell; non-finite floats become ``nan``/``inf`` tokens."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def json_safe(obj):
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if math.isfinite(obj) else repr(obj)
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config -> objects


def _activation(cfg) -> Activation:
    return Activation(cfg["model"]["activation"])


def _loss(cfg) -> Loss:
    return Loss(cfg["model"]["loss"])


def _prior(cfg) -> FactorizedGaussianPrior:
    return FactorizedGaussianPrior(cfg["prior"]["mean"], cfg["prior"]["variance"])


def _schedule(cfg) -> TemperatureSchedule:
    return TemperatureSchedule.from_dict(cfg["schedule"])


def teacher_from_config(ds: dict) -> TeacherDistribution:
    spec = TeacherSpec(
        n_teacher=ds["n_teacher"], d_x=ds["d_x"], d_y=ds["d_y"], activation=ds["activation"],
        weight_scale=ds["weight_scale"], noise_std=ds["noise_std"], seed=ds["teacher_seed"],
    )
    return TeacherDistribution(spec, ds["input_scale"])


def build_dataset(ds: dict, seed: int) -> tuple[Dataset, Dataset | None]:
    """Training set and (optional) test set described by a dataset config block."""
    kind = ds.get("kind")
    if kind == "blobs":
        full = synth_blobs(ds["n_per_class"], ds["n_classes"], ds["d_x"], ds["separation"], stream(seed, 60))
    elif kind == "idx":
        full = load_idx(ds["images"], ds["labels"], ds.get("n_classes", 10))
        if ds.get("subset"):
            idx = np.sort(stream(seed, 63).permutation(full.p)[: ds["subset"]])
            full = full.subset(idx)
        if ds.get("test_images"):
            test = load_idx(ds["test_images"], ds["test_labels"], ds.get("n_classes", 10))
            if ds.get("bias"):
                full, test = full.with_bias(), test.with_bias()
            return full, test
    elif kind == "csv":
        full = load_csv_regression(ds["path"], ds["targets"])
    elif kind == "teacher":
        teacher = teacher_from_config(ds)
        X, Y = teacher.sample(ds["p"], stream(seed, 62))
        full = Dataset(X, Y, None, "teacher", {"source": "teacher"})
    elif kind == "gaussian_inputs":
        gen = stream(seed, 64)
        X = ds["center"] + ds["scale"] * gen.standard_normal((ds["p"], ds["d_x"]))
        full = Dataset(X, np.zeros((ds["p"], 1)), None, "gaussian_inputs")
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    if full.p == 0:
        raise ConfigError(f"dataset {kind!r} has no rows")
    if ds.get("bias"):
        full = full.with_bias()
    frac = ds.get("test_fraction")
    if frac:
        return split(full, 1.0 - frac, stream(seed, 61))
    return full, None


def _step_size(cfg, n: int, p: int, eta: float) -> float:
    tc = cfg["trainer"]
    if tc.get("step_size") is not None:
        return float(tc["step_size"])
    return mean_field_step_size(n, p, eta, tc["lr"], tc["kl_stability"])


def _train_one(cfg, train_set: Dataset, n: int, schedule: TemperatureSchedule, seed: int):
    tc = cfg["trainer"]
    eta = resolve_eta(schedule, train_set.p, n)
    tcfg = TrainerConfig(
        step_size=_step_size(cfg, n, train_set.p, eta),
        iterations=tc["iterations"],
        schedule=schedule,
        mc_samples=tc["mc_samples"],
        batch_count=tc["batch_count"],
        seed=seed,
        kl_mode=tc["kl_mode"],
        record_every=tc["record_every"],
        record_mc_samples=cfg["metrics"]["elbo_mc_samples"],
    )
    init = initialize_posterior(n, train_set.d_x, train_set.d_y, seed, cfg["init"]["mean_std"], cfg["init"]["sigma"])
    post, trace = train(init, _prior(cfg), train_set, tcfg, _loss(cfg), _activation(cfg))
    return post, trace, tcfg


def _records(cfg, post: VariationalPosterior, ds: Dataset, key: int):
    probs = predictive_probabilities(
        post, ds.features, cfg["metrics"]["prediction_samples"], stream(cfg["seed"], 50, key), _activation(cfg)
    )
    labels = ds.targets if ds.is_classification else None
    return metrics.records_from_probs(probs, labels)


def _evaluate(cfg, post: VariationalPosterior, ds: Dataset, key: int = 0) -> dict:
    if ds.is_classification:
        return metrics.summary(_records(cfg, post, ds, key), cfg["metrics"]["bins"])
    pred = predictive_mean(
        post, ds.features, cfg["metrics"]["prediction_samples"], stream(cfg["seed"], 50, key), _activation(cfg)
    )
    return {"mse": float(np.mean(np.sum((pred - ds.targets) ** 2, axis=1))), "n_records": ds.p}


# ---------------------------------------------------------------------------
# runners


def run_train(cfg, out: Path) -> dict:
    train_set, _ = build_dataset(cfg["dataset"], cfg["seed"])
    post, trace, tcfg = _train_one(cfg, train_set, cfg["model"]["N"], _schedule(cfg), cfg["seed"])
    post.save(out / "posterior.json")
    trace.to_csv(out / "trace.csv")
    return {"step_size": tcfg.step_size, "final_kl": kl_total(post, _prior(cfg)), "trace_rows": len(trace.rows)}


def run_evaluate(cfg, out: Path) -> dict:
    if not cfg.get("posterior"):
        raise ConfigError("evaluate needs a 'posterior' file")
    post = VariationalPosterior.load(cfg["posterior"])
    train_set, test_set = build_dataset(cfg["dataset"], cfg["seed"])
    ds = test_set if test_set is not None else train_set
    if ds.d_x != post.d_x:
        raise ConfigError(f"posterior expects {post.d_x} features, dataset has {ds.d_x}")
    result = _evaluate(cfg, post, ds)
    write_json(out / "metrics.json", result)
    return {k: v for k, v in result.items() if k != "bins"}


TAU_COLUMNS = (
    "tau", "eta", "marker", "status", "step_size", "accuracy", "nll", "ece",
    "mean_confidence", "train_accuracy", "final_kl", "final_kl_per_neuron",
)


def run_tau_sweep(cfg, out: Path) -> dict:
    train_set, test_set = build_dataset(cfg["dataset"], cfg["seed"])
    if test_set is None:
        raise ConfigError("tau-sweep needs a test split (dataset.test_fraction)")
    n = cfg["model"]["N"]
    points = [(float(t), TemperatureSchedule.scaled(t), "") for t in cfg["taus"]]
    if cfg.get("include_reference", True):
        eta_ref = 1.0
        points.append((eta_ref * n / train_set.p, TemperatureSchedule.fixed(eta_ref), "no_cooling"))
    rows = []
    for k, (tau, schedule, marker) in enumerate(points):
        eta = resolve_eta(schedule, train_set.p, n)
        row = {"tau": tau, "eta": eta, "marker": marker or "sweep", "step_size": _step_size(cfg, n, train_set.p, eta)}
        try:
            post, _, _ = _train_one(cfg, train_set, n, schedule, cfg["seed"])
        except TrainingDiverged as exc:
            log.warning("tau=%g diverged: %s", tau, exc)
            rows.append(dict(row, status="diverged", **{c: math.nan for c in TAU_COLUMNS[5:]}))
            continue
        test = _evaluate(cfg, post, test_set, key=1)
        train_acc = metrics.accuracy(_records(cfg, post, train_set, key=2))
        kl = kl_total(post, _prior(cfg))
        rows.append(dict(
            row, status="ok", accuracy=test["accuracy"], nll=test["nll"], ece=test["ece"],
            mean_confidence=test["mean_confidence"], train_accuracy=train_acc,
            final_kl=kl, final_kl_per_neuron=kl / n,
        ))
        log.info("tau=%g acc=%.3f conf=%.3f kl/N=%.3g", tau, test["accuracy"], test["mean_confidence"], kl / n)
    write_csv(out / "tau_sweep.csv", TAU_COLUMNS, rows)
    sweep = [r for r in rows if r["marker"] == "sweep" and r["status"] == "ok"]
    return {
        "confidence_violations_strict": monotone_violations([r["mean_confidence"] for r in sweep], 0.0),
        "confidence_violations": monotone_violations(
            [r["mean_confidence"] for r in sweep], cfg.get("confidence_tie_tolerance", 0.0)
        ),
        "rows": len(rows),
    }


def monotone_violations(values, tolerance: float = 0.0) -> int:
    """Number of consecutive increases larger than ``tolerance``."""
    return int(sum(b > a + tolerance for a, b in zip(values, values[1:])))


COLLAPSE_COLUMNS = ("N", "status", "eta", "step_size", "final_kl", "final_data_term", "final_elbo")


def run_collapse(cfg, out: Path) -> dict:
    train_set, _ = build_dataset(cfg["dataset"], cfg["seed"])
    schedule = _schedule(cfg)
    rows = []
    for n in cfg["N_grid"]:
        eta = resolve_eta(schedule, train_set.p, n)
        row = {"N": n, "eta": eta, "step_size": _step_size(cfg, n, train_set.p, eta)}
        try:
            post, _, _ = _train_one(cfg, train_set, n, schedule, cfg["seed"])
        except TrainingDiverged as exc:
            log.warning("N=%d diverged: %s", n, exc)
            rows.append(dict(row, status="diverged", final_kl=math.nan, final_data_term=math.nan, final_elbo=math.nan))
            continue
        bd = elbo_estimate(
            post, _prior(cfg), train_set.features, train_set.targets, _loss(cfg), _activation(cfg),
            schedule, cfg["metrics"]["elbo_mc_samples"], stream(cfg["seed"], 70, n),
        )
        rows.append(dict(row, status="ok", final_kl=bd.kl_term, final_data_term=bd.data_term, final_elbo=bd.elbo))
        log.info("N=%d KL=%.4g data=%.4g", n, bd.kl_term, bd.data_term)
    write_csv(out / "collapse.csv", COLLAPSE_COLUMNS, rows)
    return {"final_kl": {r["N"]: r["final_kl"] for r in rows}}


BALANCE_COLUMNS = ("N", "eta_mode", "eta", "data_term", "kl_term", "ratio")


def run_balance_ratio(cfg, out: Path) -> dict:
    """Untrained-posterior ratio of the two ELBO terms over a grid of widths."""
    train_set, _ = build_dataset(cfg["dataset"], cfg["seed"])
    if train_set.p == 0:
        raise ConfigError("balance-ratio needs a non-empty dataset")
    schedules = [TemperatureSchedule.fixed(1.0)] + [TemperatureSchedule.scaled(t) for t in cfg["taus"]]
    rows = []
    for n in cfg["N_grid"]:
        post = initialize_posterior(n, train_set.d_x, train_set.d_y, cfg["seed"], cfg["init"]["mean_std"], cfg["init"]["sigma"])
        for schedule in schedules:
            bd = elbo_estimate(
                post, _prior(cfg), train_set.features, train_set.targets, _loss(cfg), _activation(cfg),
                schedule, cfg["metrics"]["elbo_mc_samples"], stream(cfg["seed"], 30, n),
            )
            rows.append({
                "N": n, "eta_mode": schedule.label(), "eta": bd.eta,
                "data_term": bd.data_term, "kl_term": bd.kl_term, "ratio": balance_ratio(bd),
            })
    write_csv(out / "balance_ratio.csv", BALANCE_COLUMNS, rows)
    return {"rows": len(rows)}


def _atom_sampler(cfg, d_x: int, d_y: int):
    a = cfg["atoms"]
    return default_atom_sampler(d_x, d_y, a["mu_a_mean"], a["mu_b_norm"], a["mean_spread"], a["sigma"])


THEOREM3_COLUMNS = ("N", "p", "tau", "gap", "gap_times_N_over_p", "std_error")


def run_theorem3(cfg, out: Path) -> dict:
    train_set, _ = build_dataset(cfg["dataset"], cfg["seed"])
    sampler = _atom_sampler(cfg, train_set.d_x, train_set.d_y)
    p = train_set.p
    if cfg["mode"] == "exact":
        require_square_relu(_loss(cfg), _activation(cfg))
        table, slope = theorem3_scaling_experiment(sampler, train_set.features, cfg["N_grid"], cfg["seed"])
        rows = [
            {"N": r.n, "p": r.p, "tau": cfg["tau"], "gap": r.gap, "gap_times_N_over_p": r.gap_times_n_over_p, "std_error": 0.0}
            for r in table
        ]
    elif cfg["mode"] == "mc":
        grid = sorted(cfg["N_grid"])
        pool = sampler(grid[-1], stream(cfg["seed"], 20))
        rows = []
        for n in grid:
            atoms = VariationalPosterior(pool.mu_a[:n], pool.rho_a[:n], pool.mu_b[:n], pool.rho_b[:n])
            gap, se = mc_gap_estimate(
                atoms, train_set.features, train_set.targets, _loss(cfg), _activation(cfg),
                cfg["mc_samples"], stream(cfg["seed"], 21, n),
            )
            rows.append({"N": n, "p": p, "tau": cfg["tau"], "gap": gap, "gap_times_N_over_p": gap * n / p, "std_error": se})
        positive = [r for r in rows if r["gap"] > 0]
        slope = loglog_slope([r["N"] for r in positive], [r["gap"] for r in positive]) if len(positive) > 1 else math.nan
    else:
        raise ConfigError(f"theorem3 mode must be 'exact' or 'mc', got {cfg['mode']!r}")
    write_csv(out / "theorem3.csv", THEOREM3_COLUMNS, rows)
    scaled = [r["gap_times_N_over_p"] for r in rows]
    return {"slope": slope, "max_min_ratio": max(scaled) / min(scaled) if min(scaled) > 0 else math.inf}


PROP5_COLUMNS = ("p", "mean_abs_deviation", "std_error", "fitted_slope")


def run_prop5(cfg, out: Path) -> dict:
    ds = cfg["dataset"]
    if ds.get("kind") != "teacher":
        raise ConfigError("prop5 needs a teacher dataset (a re-drawable distribution)")
    teacher = teacher_from_config(ds)
    loss, act, prior, tau = _loss(cfg), _activation(cfg), _prior(cfg), cfg["tau"]
    nu = _atom_sampler(cfg, ds["d_x"], ds["d_y"])(cfg["model"]["N"], stream(cfg["seed"], 40))
    population, _ = r_tau_estimate(nu, teacher.sample, tau, cfg["population_draws"], stream(cfg["seed"], 41), loss, act, prior)
    rows = []
    for p in cfg["p_grid"]:
        devs = []
        for r in range(cfg["resamples"]):
            X, Y = teacher.sample(p, stream(cfg["seed"], 42, p, r))
            devs.append(abs(f_tau_p(nu, X, Y, prior, tau, loss, act) - population))
        devs = np.array(devs)
        rows.append({"p": p, "mean_abs_deviation": float(devs.mean()), "std_error": float(devs.std(ddof=1) / math.sqrt(devs.size))})
    slope = loglog_slope([r["p"] for r in rows], [r["mean_abs_deviation"] for r in rows])
    for r in rows:
        r["fitted_slope"] = slope
    write_csv(out / "prop5.csv", PROP5_COLUMNS, rows)
    return {"slope": slope, "population_objective": population}


def run_ood(cfg, out: Path) -> dict:
    train_set, test_set = build_dataset(cfg["dataset"], cfg["seed"])
    in_dist = test_set if test_set is not None else train_set
    ood_cfg = dict(cfg["ood_dataset"])
    if ood_cfg.get("kind") == "gaussian_inputs":
        ood_cfg.setdefault("d_x", cfg["dataset"]["d_x"])
        ood_cfg.setdefault("bias", cfg["dataset"].get("bias", False))
    ood_set, _ = build_dataset(ood_cfg, cfg["seed"] + 1)
    if cfg.get("posterior"):
        post = VariationalPosterior.load(cfg["posterior"])
    else:
        post, _, _ = _train_one(cfg, train_set, cfg["model"]["N"], _schedule(cfg), cfg["seed"])
        post.save(out / "posterior.json")
    if ood_set.d_x != post.d_x or in_dist.d_x != post.d_x:
        raise ConfigError(
            f"dimension mismatch: posterior d_x={post.d_x}, in-distribution {in_dist.d_x}, OOD {ood_set.d_x}"
        )
    bins = cfg["metrics"]["entropy_bins"]
    rec_in = _records(cfg, post, in_dist, key=3)
    rec_out = _records(cfg, post, ood_set, key=4)
    metrics.entropy_histogram(rec_in, bins).to_csv(out / "entropy_in.csv")
    metrics.entropy_histogram(rec_out, bins).to_csv(out / "entropy_ood.csv")
    ent_in = [metrics.predictive_entropy(r.probs) for r in rec_in]
    ent_out = [metrics.predictive_entropy(r.probs) for r in rec_out]
    result = {
        "mean_entropy_in": float(np.mean(ent_in)),
        "mean_entropy_ood": float(np.mean(ent_out)),
        "max_entropy": math.log(post.d_y),
        "n_in": len(rec_in),
        "n_ood": len(rec_out),
    }
    write_json(out / "ood_summary.json", result)
    return result


RUNNERS = {
    "train": run_train,
    "evaluate": run_evaluate,
    "tau-sweep": run_tau_sweep,
    "collapse": run_collapse,
    "balance-ratio": run_balance_ratio,
    "theorem3": run_theorem3,
    "prop5": run_prop5,
    "ood": run_ood,
}
