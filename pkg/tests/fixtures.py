"""Synthetic evaluation curves shared by the report tests."""

import numpy as np

from repaint.harness import EvalRecord


def curve_records(curves):
    """``{seed: [scores]}`` -> EvalRecords."""
    return [EvalRecord(k + 1, seed, float(v), 0.0, 0) for seed, c in curves.items() for k, v in enumerate(c)]


def reacher_fixture():
    """Seed-averaged baseline first reaches its best score at iteration 173; REPAINT gets there at 42.

    Per-seed noise is on a 1/16 grid and sums to zero across seeds, so averaging is exact
    on the plateaus and the averaged curves are the designed ones.
    """
    base = np.linspace(-40.0, -4.0, 200)
    base[172:] = -4.0
    base[:172] = np.minimum(base[:172], -4.01)
    arm = np.concatenate([np.linspace(-40.0, -4.5, 41), np.full(159, -3.9)])
    noise = np.round(np.random.default_rng(0).normal(scale=0.5, size=(5, 200)) * 16) / 16
    noise[4] = -noise[:4].sum(axis=0)
    return {
        "baseline": curve_records({s: base + noise[s] for s in range(5)}),
        "repaint": curve_records({s: arm + noise[s] for s in range(5)}),
    }
