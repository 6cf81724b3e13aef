"""Sample-efficiency experiment: 70:30 site split with training subsampling.

One seeded stratified split fixes the test set for the whole experiment.
The training sites are then subsampled at each rho level (nested within a
replication: larger rho extends the smaller site set) and the model is
refit and rescored per (condition, rho, replication) cell, with a fresh
elicitation per cell for LLM conditions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import seeding
from .crossval import CvCondition, _resolve_spec, stratify_sites
from .data import Dataset
from .elicitation import AggregatedPrior, ElicitationConfig
from .model import HyperPriorSpec
from .pipeline import map_cells
from .sampler import McmcConfig

DEFAULT_RHO_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if not self.stratified:
            raise ValueError("only stratified splits are supported")


def train_test_split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Site-level stratified split; patients follow their sites.

    A stratum with fewer than 2 sites cannot contribute to both halves;
    it goes entirely to train with a warning.
    """
    train_sites: list[str] = []
    test_sites: list[str] = []
    for stratum in stratify_sites(dataset):
        n = stratum.n_sites
        if n == 0:
            continue
        if n < 2:
            warnings.warn(
                f"stratum {stratum.label.value!r} has {n} site(s); "
                "assigning all to train", stacklevel=2)
            train_sites.extend(stratum.site_ids)
            continue
        rng = seeding.rng(spec.seed, "split", stratum.label.value)
        order = rng.permutation(n)
        n_train = _round_half_up(spec.train_fraction * n)
        n_train = min(max(n_train, 1), n - 1)  # both halves keep >= 1 site
        for i, idx in enumerate(order):
            (train_sites if i < n_train else test_sites).append(stratum.site_ids[idx])
    return dataset.subset_by_sites(train_sites), dataset.subset_by_sites(test_sites)


def subsample_training(train: Dataset, rho: float, seed: int,
                       nested: bool = True) -> Dataset:
    """Retain round(rho * n) sites per stratum (>= 1 per nonempty stratum).

    With ``nested`` (the default), the retained set at a larger rho is a
    superset of the set at a smaller rho for the same seed, because each
    stratum keeps a prefix of one fixed seeded permutation.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    if rho == 1.0:
        return train
    kept: list[str] = []
    for stratum in stratify_sites(train):
        n = stratum.n_sites
        if n == 0:
            continue
        key = ("subsample", stratum.label.value) if nested else \
              ("subsample", stratum.label.value, f"rho={rho:g}")
        rng = seeding.rng(seed, *key)
        order = rng.permutation(n)
        n_keep = max(_round_half_up(rho * n), 1)
        kept.extend(stratum.site_ids[idx] for idx in order[:n_keep])
    return train.subset_by_sites(kept)


@dataclass(frozen=True)
class EfficiencyRun:
    rho: float
    replication: int  # 1-based
    spec: HyperPriorSpec
    prior: AggregatedPrior | None
    n_train_patients: int
    n_train_sites: int
    n_test_patients: int
    mean_lpd: float
    rhat_flags: dict[str, float]


@dataclass(frozen=True)
class EfficiencyCell:
    """All replications of one (condition, rho) combination."""

    condition: CvCondition
    rho: float
    runs: tuple[EfficiencyRun, ...]

    @property
    def lpd_mean(self) -> float:
        return float(np.mean([r.mean_lpd for r in self.runs]))

    @property
    def lpd_sd(self) -> float:
        vals = [r.mean_lpd for r in self.runs]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    @property
    def train_patients_mean(self) -> float:
        return float(np.mean([r.n_train_patients for r in self.runs]))

    @property
    def train_patients_range(self) -> tuple[int, int]:
        counts = [r.n_train_patients for r in self.runs]
        return min(counts), max(counts)


@dataclass(frozen=True)
class EfficiencyResult:
    cells: tuple[EfficiencyCell, ...]
    test_site_ids: tuple[str, ...]
    n_test_patients: int
    split: SplitSpec


def run_efficiency_experiment(
    dataset: Dataset,
    conditions: list[CvCondition],
    mcmc: McmcConfig,
    elicit: ElicitationConfig,
    transport,
    rho_grid: tuple[float, ...] = DEFAULT_RHO_GRID,
    n_replications: int = 20,
    split: SplitSpec | None = None,
    seed: int = 0,
    n_jobs: int = 1,
    rho_grid_by_condition: dict[str, tuple[float, ...]] | None = None,
    queries_per_replication: int = 1,
    nested: bool = True,
) -> EfficiencyResult:
    """Run every (condition, rho, replication) cell against one fixed test set.

    The subsampling seed is a function of the replication index alone, so
    all conditions and rho levels within a replication see the same site
    permutations (and nested subsampling makes rho levels comparable).
    LLM conditions elicit a fresh prior per cell with
    ``queries_per_replication`` queries, giving n_replications independent
    queries per sample size by default.
    """
    if n_replications < 1:
        raise ValueError("n_replications must be >= 1")
    split = split if split is not None else SplitSpec(seed=seed)
    train, test = train_test_split(dataset, split)

    per_query_elicit = replace(elicit, n_queries=queries_per_replication)
    overrides = rho_grid_by_condition or {}

    plan: list[tuple[CvCondition, float, int]] = []
    resolved: list[tuple[HyperPriorSpec, AggregatedPrior | None]] = []
    cell_args: list[tuple] = []
    train_meta: list[tuple[int, int]] = []
    for condition in conditions:
        ident = condition.identity()
        grid = overrides.get(ident, rho_grid)
        for rho in grid:
            for rep in range(1, n_replications + 1):
                sub_seed = seeding.derive_seed(seed, "eff_subsample", rep)
                sub = subsample_training(train, rho, sub_seed, nested=nested)
                spec, prior = _resolve_spec(condition, per_query_elicit, transport)
                cell_mcmc = replace(
                    mcmc,
                    seed=seeding.derive_seed(seed, "eff_mcmc", ident, f"rho={rho:g}", rep),
                )
                lpd_seed = seeding.derive_seed(seed, "eff_lpd", ident, f"rho={rho:g}", rep)
                plan.append((condition, rho, rep))
                resolved.append((spec, prior))
                cell_args.append((sub, test, spec, cell_mcmc, lpd_seed))
                train_meta.append((sub.n_patients, sub.n_sites))

    scores = map_cells(cell_args, n_jobs=n_jobs)

    by_cell: dict[tuple[str, float], list[EfficiencyRun]] = {}
    cell_order: list[tuple[CvCondition, float]] = []
    for (condition, rho, rep), (spec, prior), (n_pat, n_sites), score in zip(
            plan, resolved, train_meta, scores):
        key = (condition.identity(), rho)
        if key not in by_cell:
            by_cell[key] = []
            cell_order.append((condition, rho))
        by_cell[key].append(EfficiencyRun(
            rho=rho, replication=rep, spec=spec, prior=prior,
            n_train_patients=n_pat, n_train_sites=n_sites,
            n_test_patients=score.lpd.n_patients,
            mean_lpd=score.mean_lpd, rhat_flags=score.rhat_flags,
        ))

    cells = tuple(
        EfficiencyCell(condition=condition, rho=rho,
                       runs=tuple(by_cell[(condition.identity(), rho)]))
        for condition, rho in cell_order
    )
    return EfficiencyResult(cells=cells, test_site_ids=test.site_ids,
                            n_test_patients=test.n_patients, split=split)


def efficiency_table_rows(result: EfficiencyResult) -> list[dict]:
    """Per-replication rows for the delimited results export."""
    rows = []
    for cell in result.cells:
        for run in cell.runs:
            rows.append({
                "condition": cell.condition.identity(),
                "rho": f"{cell.rho:g}",
                "replication": run.replication,
                "n_train_patients": run.n_train_patients,
                "lpd_mean": repr(run.mean_lpd),
            })
    return rows


def efficiency_summary_rows(result: EfficiencyResult) -> list[dict]:
    """One row per (condition, rho): mean/SD over replications."""
    rows = []
    for cell in result.cells:
        lo, hi = cell.train_patients_range
        rows.append({
            "condition": cell.condition.identity(),
            "rho": f"{cell.rho:g}",
            "n_replications": len(cell.runs),
            "lpd_mean": repr(cell.lpd_mean),
            "lpd_sd": repr(cell.lpd_sd),
            "train_patients_mean": repr(cell.train_patients_mean),
            "train_patients_min": lo,
            "train_patients_max": hi,
        })
    return rows
