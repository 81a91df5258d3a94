"""Per-pixel decisions from nested region probabilities."""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class RegionDecision(IntEnum):
    NON_TUMOR = 0
    EDEMA_ONLY = 1
    CORE_NON_ENHANCING = 2
    ENHANCING = 3


def hierarchical_decide(p0: float, p1: float, p2: float) -> RegionDecision:
    """Walk the three gates: tumor, then core, then enhancing.

    A tie at any gate resolves to the less specific outcome.
    """
    for v in (p0, p1, p2):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"probability {v} outside [0, 1]")
    if not p0 > 1.0 - p0:
        return RegionDecision.NON_TUMOR
    if not p1 > p0 - p1:
        return RegionDecision.EDEMA_ONLY
    if not p2 > p1 - p2:
        return RegionDecision.CORE_NON_ENHANCING
    return RegionDecision.ENHANCING


def hierarchical_decide_array(p0, p1, p2) -> np.ndarray:
    """Vectorised :func:`hierarchical_decide`; returns int codes of RegionDecision."""
    p0, p1, p2 = (np.asarray(a, dtype=np.float64) for a in (p0, p1, p2))
    if not all(np.all((a >= 0.0) & (a <= 1.0)) for a in (p0, p1, p2)):
        raise ValueError("probabilities outside [0, 1]")
    tumor = p0 > 1.0 - p0
    core = tumor & (p1 > p0 - p1)
    enh = core & (p2 > p1 - p2)
    return tumor.astype(np.int8) + core + enh


def decision_masks(codes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(complete, core, enhancing) boolean masks from decision codes."""
    codes = np.asarray(codes)
    return codes >= RegionDecision.EDEMA_ONLY, codes >= RegionDecision.CORE_NON_ENHANCING, codes == RegionDecision.ENHANCING


def decisions_to_labels(codes) -> np.ndarray:
    """Representative label per decision: 0, 2 (edema), 1 (core), 4 (enhancing).

    Region masks of the result agree with :func:`decision_masks`.
    """
    lut = np.array([0, 2, 1, 4], dtype=np.uint8)
    return lut[np.asarray(codes)]


def argmax_decide(class_probs) -> np.ndarray:
    """Index of the most probable class along the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(class_probs), axis=-1)
