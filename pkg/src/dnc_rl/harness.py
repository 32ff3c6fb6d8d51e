"""Experiment orchestration: config files, seed fan-out, sweeps, summaries.

A JSON config names an environment, a variant (or list of variants to
compare), seeds, and optional overrides for the optimizer and trainer
sections.  ``run_experiment`` executes every (variant, sweep point, seed)
combination, each into its own directory:

    output_dir/<env>/<variant>/<alpha tag>/<seed>/
        metrics.csv       per-iteration metrics rows (streamed)
        diagnostics.csv   per-update trust-region diagnostics (streamed)
        policy.dncp       final global policy checkpoint
        partition.json    the context partition (absent for monolithic)

and finally rebuilds a summary table from the metrics files on disk, so
a crashed run can never corrupt another's outputs.  Runs may execute in
parallel processes; DNC_THREADS caps the worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dnc import VARIANTS, DnCConfig, run_dnc
from .envs import ENVS, make_env
from .errors import ConfigError
from .metrics import (
    MetricsRow,
    read_metrics_csv,
    write_diagnostics_csv,
    write_metrics_csv,
)
from .partition import save_partition
from .policy import save_policy
from .rng import Rng
from .trpo import TrpoConfig


@dataclass(frozen=True)
class SweepSpec:
    alphas: tuple[float, ...] = ()
    max_kls: tuple[float, ...] = ()

    def points(self, base_alpha: float, base_max_kl: float):
        alphas = self.alphas or (base_alpha,)
        max_kls = self.max_kls or (base_max_kl,)
        return [(a, k) for a in alphas for k in max_kls]


@dataclass(frozen=True)
class ExperimentConfig:
    env_name: str = "bimodal"
    variant: str = "dnc"
    variants: tuple[str, ...] = ()  # non-empty switches to comparison mode
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    dnc: DnCConfig = field(default_factory=DnCConfig)
    sweep: Optional[SweepSpec] = None
    output_dir: str = "runs"
    eval_cadence: int = 5
    eval_episodes: int = 20
    record_timing: bool = False

    def __post_init__(self):
        if self.env_name not in ENVS:
            raise ConfigError(f"unknown env {self.env_name!r}; choose from {sorted(ENVS)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for v in (self.variant, *self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")


# Keys accepted in each config-file section; anything else is rejected
# by name so typos fail fast.
_TOP_KEYS = {
    "env", "variant", "variants", "seeds", "trpo", "dnc", "sweep",
    "output_dir", "eval_cadence", "eval_episodes", "record_timing",
}
_TRPO_KEYS = {f.name for f in dataclasses.fields(TrpoConfig)}
_DNC_KEYS = {f.name for f in dataclasses.fields(DnCConfig)} - {"variant"}
_SWEEP_KEYS = {"alphas", "max_kls"}


def _check_keys(section: dict, allowed: set[str], prefix: str = "") -> None:
    for key in section:
        if key not in allowed:
            where = f"{prefix}{key}"
            raise ConfigError(f"unknown config key {where!r}")


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def config_from_dict(doc: dict) -> ExperimentConfig:
    _check_keys(doc, _TOP_KEYS)
    trpo_doc = dict(doc.get("trpo", {}))
    _check_keys(trpo_doc, _TRPO_KEYS, "trpo.")
    dnc_doc = dict(doc.get("dnc", {}))
    _check_keys(dnc_doc, _DNC_KEYS, "dnc.")
    for section in (trpo_doc, dnc_doc):
        for key, val in section.items():
            section[key] = _tupled(val)
    sweep = None
    if "sweep" in doc and doc["sweep"] is not None:
        sweep_doc = dict(doc["sweep"])
        _check_keys(sweep_doc, _SWEEP_KEYS, "sweep.")
        sweep = SweepSpec(
            alphas=tuple(sweep_doc.get("alphas", ())),
            max_kls=tuple(sweep_doc.get("max_kls", ())),
        )
    try:
        trpo_cfg = TrpoConfig(**trpo_doc)
        dnc_cfg = DnCConfig(**dnc_doc, variant=doc.get("variant", "dnc"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        env_name=doc.get("env", "bimodal"),
        variant=doc.get("variant", "dnc"),
        variants=tuple(doc.get("variants", ())),
        seeds=tuple(doc.get("seeds", (0, 1, 2, 3, 4))),
        trpo=trpo_cfg,
        dnc=dnc_cfg,
        sweep=sweep,
        output_dir=doc.get("output_dir", "runs"),
        eval_cadence=int(doc.get("eval_cadence", 5)),
        eval_episodes=int(doc.get("eval_episodes", 20)),
        record_timing=bool(doc.get("record_timing", False)),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    doc = {
        "env": cfg.env_name,
        "variant": cfg.variant,
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
        "eval_cadence": cfg.eval_cadence,
        "eval_episodes": cfg.eval_episodes,
        "record_timing": cfg.record_timing,
        "trpo": {
            f.name: _listed(getattr(cfg.trpo, f.name))
            for f in dataclasses.fields(TrpoConfig)
        },
        "dnc": {
            f.name: _listed(getattr(cfg.dnc, f.name))
            for f in dataclasses.fields(DnCConfig)
            if f.name != "variant"
        },
    }
    if cfg.variants:
        doc["variants"] = list(cfg.variants)
    if cfg.sweep is not None:
        doc["sweep"] = {
            "alphas": list(cfg.sweep.alphas),
            "max_kls": list(cfg.sweep.max_kls),
        }
    return doc


def _listed(value):
    return list(value) if isinstance(value, tuple) else value


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


def _alpha_tag(alpha: float, max_kl: float, sweep_kl: bool) -> str:
    tag = f"alpha_{alpha:g}"
    if sweep_kl:
        tag += f"_kl_{max_kl:g}"
    return tag


def run_dir_for(cfg: ExperimentConfig, variant: str, alpha: float, max_kl: float, seed: int) -> Path:
    sweep_kl = cfg.sweep is not None and len(cfg.sweep.max_kls) > 0
    return (
        Path(cfg.output_dir)
        / cfg.env_name
        / variant
        / _alpha_tag(alpha, max_kl, sweep_kl)
        / str(seed)
    )


def summary_scope(variant: str) -> str:
    """Which metrics scope represents a variant's headline performance."""
    return "oracle" if variant == "dnc_no_distill" else "global"


def _execute_run(args) -> tuple[str, Optional[str]]:
    """One (variant, alpha, max_kl, seed) training run; returns (dir, error)."""
    cfg_doc, variant, alpha, max_kl, seed = args
    cfg = config_from_dict(cfg_doc)
    run_dir = run_dir_for(cfg, variant, alpha, max_kl, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = run_dir / "metrics.csv"
    diagnostics_path = run_dir / "diagnostics.csv"
    try:
        env = make_env(cfg.env_name)
        dnc_cfg = dataclasses.replace(cfg.dnc, variant=variant, alpha=alpha)
        trpo_cfg = dataclasses.replace(cfg.trpo, max_kl=max_kl)
        rows: list[MetricsRow] = []
        diags: list[dict] = []

        # stream rows to disk as they arrive so a crash leaves a partial file
        def on_metrics(row):
            rows.append(row)
            write_metrics_csv(metrics_path, rows)

        result = run_dnc(
            env,
            dnc_cfg,
            trpo_cfg,
            Rng(seed),
            eval_cadence=cfg.eval_cadence,
            eval_episodes=cfg.eval_episodes,
            record_timing=cfg.record_timing,
            metrics_cb=on_metrics,
            diagnostics_cb=diags.append,
        )
        write_metrics_csv(metrics_path, rows)
        write_diagnostics_csv(diagnostics_path, diags)
        save_policy(run_dir / "policy.dncp", result.global_policy)
        if result.ensemble.partition is not None:
            save_partition(run_dir / "partition.json", result.ensemble.partition)
        return str(run_dir), None
    except Exception:
        err = traceback.format_exc()
        (run_dir / "error.txt").write_text(err)
        return str(run_dir), err


def _worker_count(n_runs: int) -> int:
    cap = os.environ.get("DNC_THREADS")
    workers = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(workers, n_runs))


def _run_specs(cfg: ExperimentConfig) -> list[tuple]:
    variants = cfg.variants if cfg.variants else (cfg.variant,)
    sweep = cfg.sweep or SweepSpec()
    doc = config_to_dict(cfg)
    specs = []
    for variant in variants:
        for alpha, max_kl in sweep.points(cfg.dnc.alpha, cfg.trpo.max_kl):
            for seed in cfg.seeds:
                specs.append((doc, variant, alpha, max_kl, seed))
    return specs


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run every (variant, sweep point, seed) combination; 0 iff all passed."""
    specs = _run_specs(cfg)
    workers = _worker_count(len(specs))
    failures = []
    if workers > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for run_dir, err in pool.map(_execute_run, specs):
                if err is not None:
                    failures.append(run_dir)
    else:
        for spec in specs:
            run_dir, err = _execute_run(spec)
            if err is not None:
                failures.append(run_dir)
    table = summarize(cfg.output_dir)
    write_summary(Path(cfg.output_dir), table)
    if failures:
        print(f"{len(failures)} run(s) failed:")
        for f in failures:
            print(f"  {f} (see error.txt)")
    return 1 if failures else 0


def compare_variants(cfg: ExperimentConfig) -> list[dict]:
    """Comparison mode: at least two variants under one sample budget."""
    if len(cfg.variants) < 2:
        raise ConfigError("compare_variants needs a config with >= 2 variants")
    status = run_experiment(cfg)
    if status != 0:
        raise RuntimeError("one or more comparison runs failed")
    return summarize(cfg.output_dir)


@dataclass(frozen=True)
class SummaryRow:
    env: str
    variant: str
    alpha_tag: str
    n_seeds: int
    final_return_mean: float
    final_return_sd: float
    final_success_mean: float
    best_alpha: bool = False
    best_variant: bool = False


SUMMARY_COLUMNS = (
    "env", "variant", "alpha_tag", "n_seeds", "final_return_mean",
    "final_return_sd", "final_success_mean", "best_alpha", "best_variant",
)


def _final_row(rows: list[MetricsRow], scope: str) -> Optional[MetricsRow]:
    scoped = [r for r in rows if r.scope == scope]
    return scoped[-1] if scoped else None


def summarize(output_dir) -> list[dict]:
    """Rebuild the summary table from the metrics CSVs on disk.

    Mean and SD of the final evaluation return are taken across seeds for
    each (env, variant, sweep point); the best sweep point per variant
    and the best variant per env are flagged.
    """
    root = Path(output_dir)
    groups: dict[tuple[str, str, str], list[tuple[float, float]]] = {}
    for metrics_path in sorted(root.glob("*/*/*/*/metrics.csv")):
        seed_dir = metrics_path.parent
        alpha_dir = seed_dir.parent
        variant_dir = alpha_dir.parent
        env_dir = variant_dir.parent
        rows = read_metrics_csv(metrics_path)
        final = _final_row(rows, summary_scope(variant_dir.name))
        if final is None:
            continue
        key = (env_dir.name, variant_dir.name, alpha_dir.name)
        groups.setdefault(key, []).append((final.mean_return, final.success_rate))
    out: list[SummaryRow] = []
    for (env, variant, alpha_tag), vals in sorted(groups.items()):
        returns = np.array([v[0] for v in vals])
        succ = np.array([v[1] for v in vals])
        out.append(
            SummaryRow(
                env, variant, alpha_tag, len(vals),
                float(returns.mean()),
                float(returns.std(ddof=1)) if len(vals) > 1 else 0.0,
                float(succ.mean()),
            )
        )
    # flag the best sweep point per (env, variant)
    best_alpha_keys = set()
    by_variant: dict[tuple[str, str], list[SummaryRow]] = {}
    for row in out:
        by_variant.setdefault((row.env, row.variant), []).append(row)
    for (env, variant), rows_ in by_variant.items():
        best = max(rows_, key=lambda r: r.final_return_mean)
        best_alpha_keys.add((env, variant, best.alpha_tag))
    # flag the best variant per env among best-alpha rows
    best_variant_keys = set()
    by_env: dict[str, list[SummaryRow]] = {}
    for row in out:
        if (row.env, row.variant, row.alpha_tag) in best_alpha_keys:
            by_env.setdefault(row.env, []).append(row)
    for env, rows_ in by_env.items():
        best = max(rows_, key=lambda r: r.final_return_mean)
        best_variant_keys.add((env, best.variant))
    result = []
    for row in out:
        result.append(
            dataclasses.asdict(
                dataclasses.replace(
                    row,
                    best_alpha=(row.env, row.variant, row.alpha_tag) in best_alpha_keys,
                    best_variant=(
                        (row.env, row.variant) in best_variant_keys
                        and (row.env, row.variant, row.alpha_tag) in best_alpha_keys
                    ),
                )
            )
        )
    return result


def write_summary(output_dir: Path, table: list[dict]) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(table)
    with open(output_dir / "summary.json", "w") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")


def format_summary(table: list[dict]) -> str:
    if not table:
        return "(no completed runs found)"
    lines = [
        f"{'env':<12} {'variant':<16} {'alpha':<16} {'seeds':>5} "
        f"{'final return':>22} {'success':>8}  flags"
    ]
    for row in table:
        flags = []
        if row["best_alpha"]:
            flags.append("best-alpha")
        if row["best_variant"]:
            flags.append("best-variant")
        lines.append(
            f"{row['env']:<12} {row['variant']:<16} {row['alpha_tag']:<16} "
            f"{row['n_seeds']:>5} "
            f"{row['final_return_mean']:>12.2f} ± {row['final_return_sd']:<7.2f} "
            f"{row['final_success_mean']:>8.2f}  {','.join(flags)}"
        )
    return "\n".join(lines)
