from __future__ import annotations

import numpy as np
import pytest

from aebayes.crossval import CvCondition
from aebayes.efficiency import (
    SplitSpec,
    _round_half_up,
    efficiency_summary_rows,
    efficiency_table_rows,
    run_efficiency_experiment,
    subsample_training,
    train_test_split,
)
from aebayes.elicitation import ElicitationConfig, PromptStrategy
from aebayes.sampler import McmcConfig
from conftest import make_dataset, fixture_transport

TINY_MCMC = McmcConfig(n_chains=2, n_warmup=50, n_draws=50, seed=0)


@pytest.mark.parametrize(
    "x, expected",
    [(0.5, 1), (1.5, 2), (2.5, 3), (2.4, 2), (2.6, 3), (0.49, 0), (7.0, 7)],
)
def test_round_half_up(x, expected):
    assert _round_half_up(x) == expected


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(train_fraction=0.0)
    with pytest.raises(ValueError):
        SplitSpec(train_fraction=1.0)
    with pytest.raises(ValueError):
        SplitSpec(stratified=False)


def test_split_seventy_thirty_per_stratum():
    # 10 sites in each stratum: expect 7 train / 3 test from each.
    ds = make_dataset([1] * 10 + [3] * 10 + [6] * 10)
    train, test = train_test_split(ds, SplitSpec(seed=0))
    assert train.n_sites == 21
    assert test.n_sites == 9
    small_train = [s for s in train.site_ids if ds.sites and len(ds.sites[s]) <= 2]
    assert len(small_train) == 7


def test_split_is_deterministic_and_seed_sensitive():
    ds = make_dataset([1] * 6 + [3] * 6 + [8] * 6)
    a_train, a_test = train_test_split(ds, SplitSpec(seed=5))
    b_train, b_test = train_test_split(ds, SplitSpec(seed=5))
    assert a_train.site_ids == b_train.site_ids
    assert a_test.site_ids == b_test.site_ids
    c_train, _ = train_test_split(ds, SplitSpec(seed=6))
    assert c_train.site_ids != a_train.site_ids


def test_split_partitions_patients():
    ds = make_dataset([1, 2, 3, 3, 4, 5, 6, 7])
    train, test = train_test_split(ds, SplitSpec(seed=1))
    train_ids = {r.patient_id for r in train.records}
    test_ids = {r.patient_id for r in test.records}
    assert not train_ids & test_ids
    assert len(train_ids) + len(test_ids) == ds.n_patients


def test_split_tiny_stratum_goes_to_train_with_warning():
    # Single small site cannot be split; it should land in train.
    ds = make_dataset([1] + [3] * 4 + [8] * 4)
    with pytest.warns(UserWarning, match="assigning all to train"):
        train, test = train_test_split(ds, SplitSpec(seed=0))
    assert "site000" in train.site_ids
    assert "site000" not in test.site_ids


def test_split_both_sides_nonempty_in_each_usable_stratum():
    ds = make_dataset([1, 1, 3, 3, 8, 8])
    train, test = train_test_split(ds, SplitSpec(seed=2))
    # n=2 per stratum: round_half_up(1.4)=1, clamped to [1, 1]
    assert train.n_sites == 3
    assert test.n_sites == 3


def test_subsample_full_fraction_is_identity():
    ds = make_dataset([1, 3, 8, 2, 4])
    assert subsample_training(ds, 1.0, seed=3) is ds


def test_subsample_half_of_four_site_stratum():
    ds = make_dataset([3, 3, 3, 3])
    sub = subsample_training(ds, 0.5, seed=0)
    assert sub.n_sites == 2
    assert set(sub.site_ids) <= set(ds.site_ids)


def test_subsample_keeps_at_least_one_site_per_stratum():
    ds = make_dataset([1, 1, 1, 3, 8])
    sub = subsample_training(ds, 0.2, seed=0)
    # Each represented stratum must survive even when rho*n rounds to 0.
    labels = {1: "small", 3: "medium", 8: "large"}
    kept_sizes = {len(sub.sites[s]) for s in sub.site_ids}
    assert {labels[n] for n in kept_sizes} == {"small", "medium", "large"}


def test_subsample_nested_prefixes():
    ds = make_dataset([1] * 8 + [3] * 8 + [8] * 8)
    rhos = [0.2, 0.4, 0.6, 0.8, 1.0]
    kept = [set(subsample_training(ds, r, seed=9).site_ids) for r in rhos]
    for smaller, larger in zip(kept, kept[1:]):
        assert smaller <= larger


def test_subsample_non_nested_differs():
    ds = make_dataset([1] * 10 + [3] * 10 + [8] * 10)
    nested = [set(subsample_training(ds, r, seed=1, nested=True).site_ids)
              for r in (0.2, 0.6)]
    assert nested[0] <= nested[1]
    flat = [set(subsample_training(ds, r, seed=1, nested=False).site_ids)
            for r in (0.2, 0.6)]
    # Independent draws per rho are allowed to break the prefix property.
    assert flat[0] != nested[0] or not (flat[0] <= flat[1])


def test_subsample_validation():
    ds = make_dataset([1, 3])
    with pytest.raises(ValueError):
        subsample_training(ds, 0.0, seed=0)
    with pytest.raises(ValueError):
        subsample_training(ds, 1.2, seed=0)


def _eff_dataset():
    return make_dataset([1, 2, 1, 2, 3, 4, 3, 4, 6, 8, 6, 8], seed=3)


def _elicit_cfg():
    return ElicitationConfig(model_id="m1", backoff_base=0.001)


def _llm_transport():
    return fixture_transport(
        ['{"alpha_rate": 0.5, "beta_rate": 0.1}'], "m1", "blind", 1.0)


def test_efficiency_shapes_and_test_set_identity():
    cond = CvCondition.llm("m1", PromptStrategy.BLIND, 1.0)
    result = run_efficiency_experiment(
        _eff_dataset(), [cond], TINY_MCMC, _elicit_cfg(),
        transport=_llm_transport(), rho_grid=(0.5, 1.0), n_replications=3,
        seed=0)
    assert [c.rho for c in result.cells] == [0.5, 1.0]
    for cell in result.cells:
        assert len(cell.runs) == 3
        for run in cell.runs:
            assert run.n_test_patients == result.n_test_patients
            assert run.spec.alpha_rate == 0.5
            assert run.spec.beta_rate == 0.1


def test_efficiency_full_rho_uses_entire_training_set():
    cond = CvCondition.meta_analytical()
    result = run_efficiency_experiment(
        _eff_dataset(), [cond], TINY_MCMC, _elicit_cfg(), transport=None,
        rho_grid=(1.0,), n_replications=3, seed=0)
    runs = result.cells[0].runs
    # rho=1 is the full training set, so every replication sees the same data.
    assert len({r.n_train_patients for r in runs}) == 1
    assert runs[0].n_train_patients + result.n_test_patients == _eff_dataset().n_patients


def test_efficiency_one_query_per_cell():
    cond = CvCondition.llm("m1", PromptStrategy.BLIND, 1.0)
    result = run_efficiency_experiment(
        _eff_dataset(), [cond], TINY_MCMC, _elicit_cfg(),
        transport=_llm_transport(), rho_grid=(0.5, 1.0), n_replications=4,
        seed=0)
    for cell in result.cells:
        for run in cell.runs:
            assert run.prior is not None
            assert len(run.prior.records) == 1


def test_efficiency_rho_grid_by_condition():
    meta = CvCondition.meta_analytical()
    llm = CvCondition.llm("m1", PromptStrategy.BLIND, 1.0)
    result = run_efficiency_experiment(
        _eff_dataset(), [meta, llm], TINY_MCMC, _elicit_cfg(),
        transport=_llm_transport(), rho_grid=(0.5, 1.0), n_replications=2,
        seed=0, rho_grid_by_condition={"meta_analytical": (1.0,)})
    by_cond = {}
    for cell in result.cells:
        by_cond.setdefault(cell.condition.identity(), []).append(cell.rho)
    assert by_cond["meta_analytical"] == [1.0]
    assert by_cond["m1|blind|T=1"] == [0.5, 1.0]


def test_efficiency_deterministic_across_parallelism():
    cond = [CvCondition.meta_analytical(),
            CvCondition.llm("m1", PromptStrategy.BLIND, 1.0)]

    def run(n_jobs):
        res = run_efficiency_experiment(
            _eff_dataset(), cond, TINY_MCMC, _elicit_cfg(),
            transport=_llm_transport(), rho_grid=(0.5, 1.0),
            n_replications=2, seed=1, n_jobs=n_jobs)
        return [(c.condition.identity(), c.rho, c.lpd_mean, c.lpd_sd)
                for c in res.cells]

    assert run(1) == run(2)


def test_efficiency_replications_share_subsamples_across_conditions():
    meta = CvCondition.meta_analytical()
    llm = CvCondition.llm("m1", PromptStrategy.BLIND, 1.0)
    result = run_efficiency_experiment(
        _eff_dataset(), [meta, llm], TINY_MCMC, _elicit_cfg(),
        transport=_llm_transport(), rho_grid=(0.5,), n_replications=3, seed=2)
    sizes = {}
    for cell in result.cells:
        sizes[cell.condition.identity()] = [r.n_train_patients for r in cell.runs]
    # Same replication index -> same subsampled training set for every condition.
    assert sizes["meta_analytical"] == sizes["m1|blind|T=1"]


def test_efficiency_export_rows():
    cond = CvCondition.meta_analytical()
    result = run_efficiency_experiment(
        _eff_dataset(), [cond], TINY_MCMC, _elicit_cfg(), transport=None,
        rho_grid=(0.5, 1.0), n_replications=2, seed=0)
    rows = efficiency_table_rows(result)
    assert len(rows) == 4  # 2 rho values x 2 replications
    assert {r["condition"] for r in rows} == {"meta_analytical"}
    summary = efficiency_summary_rows(result)
    assert len(summary) == 2
    assert all(r["n_replications"] == 2 for r in summary)
    means = [float(r["lpd_mean"]) for r in summary]
    assert all(np.isfinite(m) for m in means)
