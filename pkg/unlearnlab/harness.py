"""
Experiment pipelines: per-seed data generation, original and retrained
models, every configured unlearning method, evaluation and table export.

Output files are written atomically and depend only on (config, seed); log
files are the only place where timing or memory figures appear.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import psutil
from tqdm import tqdm

from unlearnlab.datagen import confuse_labels, gen_blobs, poison_backdoor, split_forget_retain
from unlearnlab.errors import ConfigInvalid
from unlearnlab.fileio import atomic_write_csv, atomic_write_json, format_float
from unlearnlab.linalg import sym_eig
from unlearnlab.metrics import ProbeConfig, evaluate_model, probe_scores
from unlearnlab.models.data_bundle import DataBundle
from unlearnlab.models.experiment_config import ExperimentConfig, config_to_dict
from unlearnlab.models.mlp import MlpModel, find_checkpoint, load_checkpoint, save_checkpoint
from unlearnlab.models.report import ORIGINAL, RETRAINED, ComparisonTable, MetricsReport
from unlearnlab.nnet import features_of, fit
from unlearnlab.unified_logger import log_error, log_eval, log_system, log_unlearn
from unlearnlab.unlearn import retrain_oracle, run_method, with_seed

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["iteration", "lp_retain", "lp_forget"]
STABILITY_SUMMARY_COLUMNS = ["method", "seed", "multiplier", "iteration", "lp_retain", "lp_forget",
                             "lp_retain_range_final_half"]


@dataclass
class SeedResult:
    seed: int
    reports: List[MetricsReport] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Bundles per pipeline
# ---------------------------------------------------------------------------

def _blobs(cfg: ExperimentConfig, seed: int) -> DataBundle:
    d = cfg.data
    return gen_blobs(d.num_classes, d.subclasses_per_class, d.dim, d.n_per_subclass, d.spread, seed)


def standard_bundle(cfg: ExperimentConfig, seed: int) -> DataBundle:
    if cfg.forget.mode == "poisoned":
        raise ConfigInvalid("poisoned forget sets come from the backdoor or confusion pipelines")
    return split_forget_retain(_blobs(cfg, seed), cfg.forget.spec_for(seed, cfg.data.num_classes), seed)


def backdoor_bundle(cfg: ExperimentConfig, seed: int) -> DataBundle:
    b = cfg.backdoor
    return poison_backdoor(_blobs(cfg, seed), b.trigger_dims, b.trigger_value, b.target_label, b.fraction, seed)


def confusion_bundle(cfg: ExperimentConfig, seed: int) -> DataBundle:
    c = cfg.confusion
    return confuse_labels(_blobs(cfg, seed), c.source_class, c.target_class, c.fraction, seed)


BundleFactory = Callable[[ExperimentConfig, int], DataBundle]


# ---------------------------------------------------------------------------
# Per-seed pipeline
# ---------------------------------------------------------------------------

def train_original(cfg: ExperimentConfig, bundle: DataBundle, seed: int) -> MlpModel:
    x, y = bundle.train_set()
    return fit(x, y, bundle.num_classes, cfg.train, seed, label="original")


def _log_memory(seed: int) -> None:
    rss_mb = psutil.Process(os.getpid()).memory_info().rss / (1024 * 1024)
    log_system(f"Seed {seed} done", extra_context={"rss_mb": round(rss_mb, 1)}, dedupe=False)


def _run_methods(cfg: ExperimentConfig, bundle: DataBundle, seed: int, original: MlpModel,
                 reference: MetricsReport, out_dir: str) -> Tuple[List[MetricsReport], Dict[str, MlpModel]]:
    """Failure policy: a method that raises yields an empty row and the run continues."""
    reports: List[MetricsReport] = []
    models: Dict[str, MlpModel] = {}
    for method_cfg in cfg.methods:
        name = method_cfg.method
        view = bundle.with_fresh_audit()
        try:
            model, trace = run_method(original, view, with_seed(method_cfg, seed), train_cfg=cfg.train)
            if name != "retrain":
                view.assert_no_full_retain_access(name)
                trace.save_csv(os.path.join(out_dir, f"trace_{name}_{seed}.csv"))
            reports.append(evaluate_model(model, bundle, name, seed, reference=reference))
            logger.debug(f"seed {seed}: {name} evaluated")
            models[name] = model
        except Exception as e:
            log_error(f"Method {name} failed on seed {seed}: {e}", exc_info=True, dedupe=False)
            reports.append(MetricsReport.empty(name, seed, f"{type(e).__name__}: {e}"))
    return reports, models


def run_seed(cfg: ExperimentConfig, seed: int, make_bundle: BundleFactory, out_dir: str) -> SeedResult:
    bundle = make_bundle(cfg, seed)
    original = train_original(cfg, bundle, seed)
    retrained = retrain_oracle(bundle.with_fresh_audit(), cfg.train, seed)

    reference = evaluate_model(retrained, bundle, RETRAINED, seed)
    reports = [
        evaluate_model(original, bundle, ORIGINAL, seed, reference=reference),
        reference.with_diffs(reference),
    ]
    method_reports, models = _run_methods(cfg, bundle, seed, original, reference, out_dir)
    reports.extend(method_reports)

    if cfg.emit_features:
        models = {ORIGINAL: original, RETRAINED: retrained, **models}
        for name, model in models.items():
            dump_features(model, bundle, os.path.join(out_dir, f"features_{name}_{seed}.csv"))
    _log_memory(seed)
    return SeedResult(seed=seed, reports=reports)


def _seed_job(args) -> SeedResult:
    cfg, seed, make_bundle, out_dir = args
    return run_seed(cfg, seed, make_bundle, out_dir)


def _map_seeds(cfg: ExperimentConfig, make_bundle: BundleFactory, out_dir: str, desc: str):
    """Yield SeedResults in seed order; seeds run in a process pool when ``jobs`` > 1."""
    jobs = [(cfg, seed, make_bundle, out_dir) for seed in cfg.seeds]
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for result in tqdm(pool.map(_seed_job, jobs), total=len(jobs), desc=desc, unit="seed", disable=None):
                yield result
    else:
        for job in tqdm(jobs, desc=desc, unit="seed", disable=None):
            yield _seed_job(job)


def write_table(table: ComparisonTable, out_dir: str) -> None:
    table.save_csv(os.path.join(out_dir, "table.csv"))
    table.save_json(os.path.join(out_dir, "table.json"))


def _run_pipeline(cfg: ExperimentConfig, make_bundle: BundleFactory, out_dir: str, desc: str) -> ComparisonTable:
    os.makedirs(out_dir, exist_ok=True)
    table = ComparisonTable()
    try:
        for result in _map_seeds(cfg, make_bundle, out_dir, desc):
            table.extend(result.reports)
    except Exception:
        if table.rows:
            write_table(compare_to_retrained(table), out_dir)
            log_error(f"{desc} aborted, partial table written to {out_dir}", dedupe=False)
        raise
    table = compare_to_retrained(table)
    write_table(table, out_dir)
    atomic_write_json(os.path.join(out_dir, "config.json"), config_to_dict(cfg))
    log_system(f"{desc} finished: {len(table.rows)} rows -> {out_dir}", dedupe=False)
    return table


def compare_to_retrained(table: ComparisonTable) -> ComparisonTable:
    """Fill |value - retrained| per row (same seed) and flag per-metric winners."""
    compared = ComparisonTable(method_order=list(table.method_order))
    for row in table.rows:
        reference = table.row(RETRAINED, row.seed)
        if reference is not None and not row.failed and not reference.failed:
            row = row.with_diffs(reference)
        compared.rows.append(replace(row, winners=[]))
    compared.mark_row_winners()
    return compared


# ---------------------------------------------------------------------------
# Public pipelines
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> ComparisonTable:
    """Class or subclass unlearning over all seeds, plus the backdoor/stability runs when flagged."""
    out_dir = cfg.ensure_output_dir()
    table = _run_pipeline(cfg, standard_bundle, out_dir, "experiment")
    if cfg.run_backdoor:
        run_backdoor(cfg, os.path.join(out_dir, "backdoor"))
    if cfg.run_stability:
        run_stability(cfg, output_dir=os.path.join(out_dir, "stability"))
    return table


def run_backdoor(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> ComparisonTable:
    """Poison, train, unlearn the poisoned samples; the table carries ASR and clean accuracy."""
    return _run_pipeline(cfg, backdoor_bundle, output_dir or cfg.ensure_output_dir(), "backdoor")


def run_confusion(cfg: ExperimentConfig, output_dir: Optional[str] = None) -> ComparisonTable:
    """Unlearn deliberately mislabelled samples; the table carries acc_confuse."""
    return _run_pipeline(cfg, confusion_bundle, output_dir or cfg.ensure_output_dir(), "confusion")


@dataclass
class StabilityResult:
    curves: Dict[Tuple[str, int], List[Tuple[int, Optional[float], Optional[float]]]] = field(default_factory=dict)
    summary: List[list] = field(default_factory=list)


def _range_final_half(curve, until: int) -> Optional[float]:
    values = [lr for it, lr, _ in curve if until / 2 <= it <= until and lr is not None]
    return float(max(values) - min(values)) if values else None


def run_stability(cfg: ExperimentConfig, multipliers: Optional[List[int]] = None,
                  output_dir: Optional[str] = None) -> StabilityResult:
    """
    Run each stability method for max(multipliers) times its budget and sample
    LP(D_r), LP(D_f) every ``sample_every`` iterations (iteration 0 included).
    """
    multipliers = sorted(multipliers or cfg.stability.multipliers)
    every = cfg.stability.sample_every
    out_dir = output_dir or cfg.ensure_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    result = StabilityResult()

    for seed in tqdm(cfg.seeds, desc="stability", unit="seed", disable=None):
        bundle = standard_bundle(cfg, seed)
        original = train_original(cfg, bundle, seed)
        probe_cfg = ProbeConfig(seed=seed)
        test_x = bundle.test_x

        def sample(model: MlpModel) -> Tuple[Optional[float], Optional[float]]:
            scores = probe_scores(features_of(model, bundle.train_x), features_of(model, test_x),
                                  bundle, probe_cfg, with_sub=False)
            return scores.lp_retain, scores.lp_forget

        for name in cfg.stability.methods:
            base = cfg.method(name)
            budget = base.total_iterations * multipliers[-1]
            method_cfg = replace(with_seed(base, seed), total_iterations=budget)
            curve = [(0, *sample(original))]

            def on_step(step: int, model: MlpModel) -> None:
                if step % every == 0:
                    curve.append((step, *sample(model)))

            try:
                run_method(original, bundle.with_fresh_audit(), method_cfg, train_cfg=cfg.train, on_step=on_step)
            except Exception as e:
                log_error(f"Stability run {name} failed on seed {seed}: {e}", exc_info=True, dedupe=False)
                continue

            result.curves[(name, seed)] = curve
            atomic_write_csv(os.path.join(out_dir, f"curve_{name}_{seed}.csv"), CURVE_COLUMNS,
                             [[it, _fmt(lr), _fmt(lf)] for it, lr, lf in curve])
            for m in multipliers:
                until = base.total_iterations * m
                point = max((p for p in curve if p[0] <= until), key=lambda p: p[0])
                result.summary.append([name, seed, m, point[0], _fmt(point[1]), _fmt(point[2]),
                                       _fmt(_range_final_half(curve, until))])
            log_unlearn(f"stability curve with {len(curve)} samples", method=name, seed=seed)
        _log_memory(seed)

    atomic_write_csv(os.path.join(out_dir, "stability_summary.csv"), STABILITY_SUMMARY_COLUMNS, result.summary)
    return result


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else format_float(value)


# ---------------------------------------------------------------------------
# Feature dump
# ---------------------------------------------------------------------------

def dump_features(model: MlpModel, bundle: DataBundle, path: str) -> None:
    """
    One row per sample: sample_id, split, partition, f_0..f_{C-1}, p_0, p_1.

    p_0, p_1 project the features onto the top two eigenvectors of the retain
    feature covariance.
    """
    train_f = features_of(model, bundle.train_x)
    test_f = features_of(model, bundle.test_x)
    retain = train_f[bundle.retain_idx]
    basis = sym_eig(retain.T @ retain).eigenvectors[:, :2]

    c = train_f.shape[1]
    header = ["sample_id", "split", "partition"] + [f"f_{j}" for j in range(c)] + ["p_0", "p_1"]
    partitions = bundle.partition_labels()
    rows = []
    sample_id = 0
    for split, feats in (("train", train_f), ("test", test_f)):
        proj = feats @ basis
        for i in range(feats.shape[0]):
            partition = partitions[i] if split == "train" else "none"
            p = [format_float(v) for v in proj[i]] + [""] * (2 - proj.shape[1])
            rows.append([sample_id, split, partition] + [format_float(v) for v in feats[i]] + p)
            sample_id += 1
    atomic_write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# Checkpoint-based steps (CLI train / unlearn / evaluate)
# ---------------------------------------------------------------------------

def _checkpoint_name(model_name: str, seed: int) -> str:
    return f"{model_name}_{seed}.json"


def train_models(cfg: ExperimentConfig) -> Dict[int, Tuple[str, str]]:
    """Train and save theta_o and theta_r per seed, plus a dataset dump."""
    out_dir = cfg.ensure_output_dir()
    saved = {}
    for seed in tqdm(cfg.seeds, desc="train", unit="seed", disable=None):
        bundle = standard_bundle(cfg, seed)
        bundle.dump_csv(os.path.join(out_dir, f"data_{seed}.csv"))
        original = train_original(cfg, bundle, seed)
        retrained = retrain_oracle(bundle.with_fresh_audit(), cfg.train, seed)
        paths = (os.path.join(out_dir, _checkpoint_name(ORIGINAL, seed)),
                 os.path.join(out_dir, _checkpoint_name(RETRAINED, seed)))
        save_checkpoint(original, paths[0])
        save_checkpoint(retrained, paths[1])
        saved[seed] = paths
    return saved


def _original_for(cfg: ExperimentConfig, bundle: DataBundle, seed: int, out_dir: str) -> MlpModel:
    path = find_checkpoint(out_dir, _checkpoint_name(ORIGINAL, seed))
    if path is not None:
        return load_checkpoint(path)
    log_system(f"No original checkpoint for seed {seed}, training one")
    original = train_original(cfg, bundle, seed)
    save_checkpoint(original, os.path.join(out_dir, _checkpoint_name(ORIGINAL, seed)))
    return original


def unlearn_models(cfg: ExperimentConfig) -> Dict[Tuple[str, int], str]:
    """Run every configured method from the saved theta_o; saves checkpoints and traces."""
    out_dir = cfg.ensure_output_dir()
    saved = {}
    for seed in tqdm(cfg.seeds, desc="unlearn", unit="seed", disable=None):
        bundle = standard_bundle(cfg, seed)
        original = _original_for(cfg, bundle, seed, out_dir)
        for method_cfg in cfg.methods:
            name = method_cfg.method
            view = bundle.with_fresh_audit()
            try:
                model, trace = run_method(original, view, with_seed(method_cfg, seed), train_cfg=cfg.train)
                if name != "retrain":
                    view.assert_no_full_retain_access(name)
                    trace.save_csv(os.path.join(out_dir, f"trace_{name}_{seed}.csv"))
            except Exception as e:
                log_error(f"Method {name} failed on seed {seed}: {e}", exc_info=True, dedupe=False)
                continue
            path = os.path.join(out_dir, _checkpoint_name(name, seed))
            save_checkpoint(model, path)
            saved[(name, seed)] = path
    return saved


def evaluate_checkpoints(cfg: ExperimentConfig) -> ComparisonTable:
    """Evaluate every saved checkpoint in the output directory against theta_r."""
    out_dir = cfg.ensure_output_dir()
    table = ComparisonTable()
    names = [ORIGINAL, RETRAINED] + [m.method for m in cfg.methods]
    for seed in cfg.seeds:
        bundle = standard_bundle(cfg, seed)
        ref_path = find_checkpoint(out_dir, _checkpoint_name(RETRAINED, seed))
        if ref_path is None:
            raise ConfigInvalid(f"no retrained checkpoint for seed {seed} in {out_dir}; run 'train' first")
        reference = evaluate_model(load_checkpoint(ref_path), bundle, RETRAINED, seed)
        for name in names:
            if name == RETRAINED:
                table.add(reference)
                continue
            path = find_checkpoint(out_dir, _checkpoint_name(name, seed))
            if path is None:
                log_eval(f"no checkpoint for {name}", method=name, seed=seed)
                continue
            try:
                table.add(evaluate_model(load_checkpoint(path), bundle, name, seed, reference=reference))
            except Exception as e:
                log_error(f"Evaluation of {name} failed on seed {seed}: {e}", exc_info=True, dedupe=False)
                table.add(MetricsReport.empty(name, seed, f"{type(e).__name__}: {e}"))
    table = compare_to_retrained(table)
    write_table(table, out_dir)
    return table
