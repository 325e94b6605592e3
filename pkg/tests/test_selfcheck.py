"""The diagnostics must pass on healthy code and fail on sabotaged code."""

import numpy as np
import pytest

from stagenet import engine, metrics, selfcheck
from stagenet.selfcheck import (
    check_auc,
    check_ewc_penalty,
    check_frozen_groups,
    check_gradients,
    check_head_routes,
    check_preservation_weights,
    run_all,
)


class TestHealthyCode:
    def test_every_check_passes(self):
        results = run_all(seed=0)
        assert len(results) == 6
        for r in results:
            assert r.passed, f"{r.name}: {r.detail}"

    def test_another_seed_passes_too(self):
        for r in run_all(seed=17):
            assert r.passed, f"{r.name}: {r.detail}"

    def test_results_carry_names_and_details(self):
        names = [r.name for r in run_all(seed=0)]
        assert names == ["gradients-match-fd", "head-routes-agree",
                         "ewc-penalty-analytic", "auc-matches-pairwise",
                         "frozen-groups-pinned", "preservation-weights"]
        for r in run_all(seed=0):
            assert r.detail


class TestMutationsAreCaught:
    def test_corrupted_conv_backward_fails_the_gradient_check(self, monkeypatch):
        orig = engine._conv2d_backward

        def corrupted(*args, **kwargs):
            gx, gk = orig(*args, **kwargs)
            return gx * 1.01, gk  # 1% input-gradient error

        monkeypatch.setattr(engine, "_conv2d_backward", corrupted)
        assert not check_gradients(seed=0).passed

    def test_dropped_kernel_gradient_fails_the_gradient_check(self, monkeypatch):
        orig = engine._conv2d_backward

        def corrupted(*args, **kwargs):
            gx, gk = orig(*args, **kwargs)
            return gx, np.zeros_like(gk)

        monkeypatch.setattr(engine, "_conv2d_backward", corrupted)
        assert not check_gradients(seed=0).passed

    def test_biased_auc_fails_the_pair_counting_check(self, monkeypatch):
        orig = metrics.roc_auc

        def biased(scores, labels):
            auc, pts = orig(scores, labels)
            return min(1.0, auc + 1e-6), pts

        monkeypatch.setattr(metrics, "roc_auc", biased)
        assert not check_auc(seed=0).passed

    def test_crash_inside_a_check_reports_failure(self, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("synthetic fault")

        monkeypatch.setattr(selfcheck, "check_head_routes", boom)
        monkeypatch.setattr(
            selfcheck, "ALL_CHECKS",
            tuple(boom if f.__name__ == "check_head_routes" else f
                  for f in selfcheck.ALL_CHECKS))
        results = run_all(seed=0)
        failed = [r for r in results if not r.passed]
        assert len(failed) == 1
        assert "synthetic fault" in failed[0].detail


class TestIndividualChecks:
    def test_gradient_check_counts_trainable_parameters(self):
        r = check_gradients(seed=3)
        assert r.passed
        assert "663 parameters" in r.detail

    def test_route_check_tolerance_is_generous_but_honest(self):
        r = check_head_routes(seed=1, trials=25)
        assert r.passed

    def test_ewc_check_passes(self):
        assert check_ewc_penalty(seed=2).passed

    def test_frozen_check_passes(self):
        assert check_frozen_groups(seed=1).passed

    def test_weight_check_passes(self):
        assert check_preservation_weights().passed
