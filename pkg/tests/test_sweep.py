"""Experiment harness: schedules, records, and small end-to-end runs."""

import numpy as np
import pytest

from nlsource import (ConvergenceRecord, DeltaSchedule, OscillatingSourceSeq,
                      SweepError, run_delta_sweep_state, run_gconv_experiment)
from nlsource.sweep import admissible_s


def test_schedule_validation():
    DeltaSchedule((0.2, 0.1, 0.05), kappa=8)
    with pytest.raises(SweepError):
        DeltaSchedule((0.1, 0.2), kappa=16)      # not decreasing
    with pytest.raises(SweepError):
        DeltaSchedule((0.2, 0.1), kappa=4)       # coupling too coarse
    with pytest.raises(SweepError):
        DeltaSchedule((0.2, -0.1), kappa=16)     # nonpositive horizon


def test_admissible_s_respects_kernel_hypothesis():
    for p in (1.5, 2.0, 3.0, 4.0):
        assert p * admissible_s(p) <= 1.0 + 1e-14


def test_oscillating_sources_realize():
    seq = OscillatingSourceSeq(lambda x: 2 * np.ones_like(x), 0.5, (4, 8))
    x = np.linspace(0, 1, 11)
    g4 = seq.realize(4)(x)
    assert np.allclose(g4, 2 + 0.5 * np.sin(4 * np.pi * x))
    with pytest.raises(SweepError):
        OscillatingSourceSeq(lambda x: x, 0.5, (8, 4))


def test_convergence_record_assertions():
    rec = ConvergenceRecord()
    rec.add_row(delta=0.2, err=1.0)
    rec.add_row(delta=0.1, err=0.4)
    assert rec.n_rows == 2
    rec.assertions["halved"] = bool(rec.column("err")[-1] < 0.5)
    assert rec.passed


def test_state_sweep_errors_shrink():
    sched = DeltaSchedule((0.2, 0.1), kappa=8)
    rec = run_delta_sweep_state(lambda x: np.ones_like(x),
                                lambda x: np.zeros_like(x),
                                None, sched, 2.0)
    assert rec.n_rows == 2
    errs = rec.column("state_err_lp")
    assert errs[1] < errs[0]
    assert rec.assertions["energy_gap_last_below_first"]


def test_gconv_small_instance():
    seq = OscillatingSourceSeq(lambda x: 2 * np.ones_like(x), 0.5,
                               (4, 8, 16, 32))
    rec = run_gconv_experiment(seq, delta=0.1, p=2.0, kappa=32)
    assert rec.passed
    gd = rec.column("g_dist_lp_prime")
    # the oscillating perturbation never converges strongly
    assert np.all(gd > 0.3)
    assert rec.column("state_err_lp")[-1] < rec.column("state_err_lp")[0]


def test_state_sweep_with_weighted_coefficient():
    sched = DeltaSchedule((0.2, 0.1), kappa=8)
    rec = run_delta_sweep_state(lambda x: np.ones_like(x),
                                lambda x: np.zeros_like(x),
                                lambda x: 1.0 + 0.5 * x, sched, 2.0)
    gaps = rec.column("energy_gap")
    assert gaps[1] < gaps[0]
