"""Transfer, decay, and gain formulas. Pure functions over scores in [0, 100]."""

from __future__ import annotations

from typing import Sequence


def knowledge_transfer(s_method: float, s_vanilla: float) -> float:
    """Relative improvement (%) of a method's task score over the
    independently trained adapter's score on the same task."""
    if s_vanilla == 0:
        raise ValueError("vanilla score is zero; transfer undefined")
    return 100.0 * (s_method - s_vanilla) / s_vanilla


def overall_transfer(per_task: Sequence[float]) -> float:
    """Mean per-task transfer over tasks 2..K of one order (the first task
    never involves prior knowledge, so it is excluded by the caller)."""
    per_task = list(per_task)
    if not per_task:
        raise ValueError("no per-task transfer values")
    return sum(per_task) / len(per_task)


def distillation_decay(s_teacher: float, s_student: float) -> float:
    """Relative score drop (%) from the improvise model to the distilled
    adapter."""
    if s_teacher == 0:
        raise ValueError("teacher score is zero; decay undefined")
    return 100.0 * (s_teacher - s_student) / s_teacher


def phase3_gain(pairs: Sequence[tuple[float, float]]) -> float:
    """Mean relative improvement (%) from the Phase-Two score to the
    Phase-Three score over tasks 2..K."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no phase score pairs")
    gains = []
    for after2, after3 in pairs:
        if after2 == 0:
            raise ValueError("phase-two score is zero; gain undefined")
        gains.append(100.0 * (after3 - after2) / after2)
    return sum(gains) / len(gains)


def cross_order_mean(values: Sequence[float]) -> float:
    """Unweighted mean across task orders."""
    values = list(values)
    if not values:
        raise ValueError("no values to average")
    return sum(values) / len(values)
