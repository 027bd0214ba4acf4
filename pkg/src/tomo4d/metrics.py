"""Relative mass bias and relative L1 recovery error, per state and averaged."""

from __future__ import annotations

import csv
import io

import numpy as np

from .grid import CarveMask, ExtinctionField, FieldSequence, GridMismatchError


def _check(truth: ExtinctionField, est: ExtinctionField) -> float:
    if truth.grid != est.grid:
        raise GridMismatchError("truth and estimate grids differ")
    norm = float(np.abs(truth.values).sum())
    if norm <= 0:
        raise ValueError("ground truth has zero mass")
    return norm


def mass_bias(truth: ExtinctionField, est: ExtinctionField) -> float:
    norm = _check(truth, est)
    return (norm - float(np.abs(est.values).sum())) / norm


def rel_error(truth: ExtinctionField, est: ExtinctionField) -> float:
    norm = _check(truth, est)
    return float(np.abs(truth.values - est.values).sum()) / norm


def masked_rel_error(truth: ExtinctionField, est: ExtinctionField, mask: CarveMask) -> float:
    """Relative L1 error restricted to the mask. Not one of the standard criteria."""
    _check(truth, est)
    m = mask.flags
    norm = float(np.abs(truth.values[m]).sum())
    if norm <= 0:
        raise ValueError("ground truth has zero mass inside the mask")
    return float(np.abs(truth.values[m] - est.values[m]).sum()) / norm


def per_state(truth_seq: FieldSequence, est_seq: FieldSequence) -> tuple[list[float], list[float]]:
    if len(truth_seq) != len(est_seq) or not np.allclose(truth_seq.times, est_seq.times, rtol=0, atol=1e-9):
        raise ValueError("truth and estimate sequences have different times")
    deltas = [mass_bias(t, e) for t, e in zip(truth_seq.states, est_seq.states)]
    eps = [rel_error(t, e) for t, e in zip(truth_seq.states, est_seq.states)]
    return deltas, eps


def average_metrics(truth_seq: FieldSequence, est_seq: FieldSequence) -> tuple[float, float]:
    """Mean mass bias and mean relative error over the sample times."""
    deltas, eps = per_state(truth_seq, est_seq)
    return float(np.mean(deltas)), float(np.mean(eps))


def write_metrics_csv(path, truth_seq: FieldSequence, est_seq: FieldSequence) -> tuple[float, float]:
    from .io import atomic_write_text

    deltas, eps = per_state(truth_seq, est_seq)
    delta, epsilon = float(np.mean(deltas)), float(np.mean(eps))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "delta_t", "epsilon_t"])
    for t, d, e in zip(truth_seq.times, deltas, eps):
        w.writerow([repr(float(t)), repr(d), repr(e)])
    w.writerow(["mean", repr(delta), repr(epsilon)])
    atomic_write_text(path, buf.getvalue())
    return delta, epsilon
