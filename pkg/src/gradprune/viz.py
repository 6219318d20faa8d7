"""Mask rendering and column-structure quantification.

Gradient-informed masks tend to concentrate pruning on particular input
columns; that concentration is measured as the variance of per-column
pruned counts relative to its expectation under uniformly random
per-row masks of the same cardinality, so "looks structured" becomes a
number with a calibrated null of 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gradprune.masks import PruneMask


class VizError(ValueError):
    pass


@dataclass
class StructureReport:
    col_prune_counts: list[int]
    chi_sq_columns: float
    excess_variance_ratio: float

    def to_json_dict(self) -> dict:
        return {
            "col_prune_counts": self.col_prune_counts,
            "chi_sq_columns": self.chi_sq_columns,
            "excess_variance_ratio": self.excess_variance_ratio,
        }


def render_mask_pgm(mask: PruneMask, path) -> None:
    """Binary P5 image, pruned = black (0), kept = white (255)."""
    m = mask.mask
    d_out, d_in = m.shape
    pixels = np.where(m, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{d_in} {d_out}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def structure_report(mask: PruneMask) -> StructureReport:
    """Column-count dispersion of a fixed per-row-cardinality mask.

    Under the null (every row prunes a uniformly random k-subset), each
    column count is a sum of d_out independent Bernoulli(k/d_in)
    indicators, so its variance is d_out * (k/d_in) * (1 - k/d_in); the
    reported ratio divides the observed count variance by that. Ratios
    beyond 1 indicate columns attract pruning systematically.
    """
    m = mask.mask
    d_out, d_in = m.shape
    row_counts = m.sum(axis=1)
    k = int(row_counts[0]) if d_out else 0
    uneven = np.flatnonzero(row_counts != k)
    if uneven.size:
        raise VizError(
            "structure report needs a fixed per-row cardinality; "
            f"rows {uneven[:8].tolist()} differ from row 0 (count {k})"
        )

    col_counts = m.sum(axis=0).astype(np.float64)
    expected = d_out * k / d_in
    chi_sq = float(((col_counts - expected) ** 2 / expected).sum()) if expected > 0 else 0.0

    p = k / d_in
    null_variance = d_out * p * (1.0 - p)
    observed = float(np.var(col_counts))
    ratio = observed / null_variance if null_variance > 0 else 0.0
    return StructureReport(
        col_prune_counts=[int(x) for x in col_counts],
        chi_sq_columns=chi_sq,
        excess_variance_ratio=float(ratio),
    )
