"""Mask construction from importance scores.

Scores are ranked inside a comparison group (whole layer, single output
row, single input column, or row/column blocks) and the smallest
floor(ratio * group_size) entries are pruned. N:M mode instead prunes
exactly m-n entries in every contiguous m-block along the input
dimension of each row. Ties are broken by pruning the larger row-major
flat index, making every mask bit-deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gradprune.metrics import ImportanceMatrix

GROUP_KINDS = ("layer", "output_1", "input_1", "output_block", "input_block")


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    kind: str = "output_1"
    block: int = 128

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise MaskError(f"unknown comparison group {self.kind!r}; known: {GROUP_KINDS}")
        if self.block < 1:
            raise MaskError("block size must be positive")

    def label(self) -> str:
        if self.kind == "layer":
            return "layer"
        side, _, blocked = self.kind.partition("_")
        return f"{side},{self.block if blocked == 'block' else 1}"

    @staticmethod
    def parse(text: str) -> "GroupSpec":
        """Parse 'layer', 'output,1', 'input,128', ... CLI syntax."""
        text = text.strip().lower()
        if text == "layer":
            return GroupSpec("layer")
        try:
            side, size = text.split(",")
            size = int(size)
        except ValueError:
            raise MaskError(f"cannot parse comparison group {text!r}") from None
        if side not in ("output", "input"):
            raise MaskError(f"cannot parse comparison group {text!r}")
        if size == 1:
            return GroupSpec(f"{side}_1")
        return GroupSpec(f"{side}_block", block=size)


@dataclass(frozen=True)
class SparsitySpec:
    """Either a pruned fraction in [0, 1] or an n:m block constraint."""

    ratio: float | None = None
    nm: tuple[int, int] | None = None

    def __post_init__(self):
        if (self.ratio is None) == (self.nm is None):
            raise MaskError("specify exactly one of ratio or nm")
        if self.ratio is not None:
            if not math.isfinite(self.ratio) or not 0.0 <= self.ratio <= 1.0:
                raise MaskError(f"sparsity ratio {self.ratio} outside [0, 1]")
        else:
            n, m = self.nm
            if n < 1 or m < 1 or n > m:
                raise MaskError(f"invalid n:m pattern {self.nm}")

    def label(self) -> str:
        if self.ratio is not None:
            return f"{self.ratio:g}"
        return f"{self.nm[0]}:{self.nm[1]}"

    @staticmethod
    def parse(text: str) -> "SparsitySpec":
        text = text.strip()
        if ":" in text:
            n, m = text.split(":")
            try:
                return SparsitySpec(nm=(int(n), int(m)))
            except ValueError:
                raise MaskError(f"cannot parse sparsity {text!r}") from None
        try:
            return SparsitySpec(ratio=float(text))
        except ValueError:
            raise MaskError(f"cannot parse sparsity {text!r}") from None


@dataclass
class PruneMask:
    """Boolean matrix, True = pruned, plus the spec that produced it."""

    mask: np.ndarray
    group: GroupSpec
    sparsity: SparsitySpec


@dataclass
class SparsityReport:
    global_sparsity: float
    per_row_pruned: list[int]
    per_col_pruned: list[int]
    nm_conformant: bool | None

    def to_json_dict(self) -> dict:
        return {
            "global_sparsity": self.global_sparsity,
            "per_row_pruned": self.per_row_pruned,
            "per_col_pruned": self.per_col_pruned,
            "nm_conformant": self.nm_conformant,
        }


def _prune_rows(scores2d: np.ndarray, flat2d: np.ndarray, k: int, out_flat: np.ndarray) -> None:
    """Mark the k smallest entries of every row; ties pruned at the larger flat index.

    Each row of ``scores2d`` is one independent comparison group whose
    global row-major flat indices (``flat2d``) are ascending along the
    row, so a stable argsort of the reversed row resolves ties toward the
    larger flat index.
    """
    if k <= 0:
        return
    width = scores2d.shape[1]
    rev_order = np.argsort(scores2d[:, ::-1], axis=1, kind="stable")[:, :k]
    cols = width - 1 - rev_order
    rows = np.arange(scores2d.shape[0])[:, None]
    out_flat[flat2d[rows, cols].reshape(-1)] = True


def build_mask(scores: ImportanceMatrix, group: GroupSpec, sp: SparsitySpec) -> PruneMask:
    s = np.ascontiguousarray(scores.scores, dtype=np.float64)
    if s.ndim != 2:
        raise MaskError("scores must be a matrix")
    if np.isnan(s).any():
        raise MaskError("scores contain NaN")
    d_out, d_in = s.shape
    mask = np.zeros((d_out, d_in), dtype=bool)
    out_flat = mask.reshape(-1)
    flat = np.arange(d_out * d_in).reshape(d_out, d_in)

    if sp.nm is not None:
        n, m = sp.nm
        if group.kind != "output_1":
            raise MaskError("n:m sparsity ranks blocks along the input dimension of each row; "
                            "it requires the output,1 comparison group")
        if d_in % m != 0:
            raise MaskError(f"m={m} does not divide d_in={d_in}")
        _prune_rows(s.reshape(-1, m), flat.reshape(-1, m), m - n, out_flat)
        return PruneMask(mask, group, sp)

    ratio = sp.ratio
    if group.kind == "layer":
        _prune_rows(s.reshape(1, -1), flat.reshape(1, -1), math.floor(ratio * s.size), out_flat)
    elif group.kind == "output_1":
        _prune_rows(s, flat, math.floor(ratio * d_in), out_flat)
    elif group.kind == "input_1":
        _prune_rows(np.ascontiguousarray(s.T), np.ascontiguousarray(flat.T),
                    math.floor(ratio * d_out), out_flat)
    elif group.kind == "output_block":
        if group.block > d_out:
            raise MaskError(f"group ({group.label()}): block {group.block} exceeds d_out={d_out}")
        for r in range(0, d_out, group.block):
            sub = s[r : r + group.block]
            _prune_rows(sub.reshape(1, -1), flat[r : r + group.block].reshape(1, -1),
                        math.floor(ratio * sub.size), out_flat)
    else:  # input_block
        if group.block > d_in:
            raise MaskError(f"group ({group.label()}): block {group.block} exceeds d_in={d_in}")
        for cstart in range(0, d_in, group.block):
            sub = np.ascontiguousarray(s[:, cstart : cstart + group.block])
            _prune_rows(sub.reshape(1, -1),
                        np.ascontiguousarray(flat[:, cstart : cstart + group.block]).reshape(1, -1),
                        math.floor(ratio * sub.size), out_flat)

    return PruneMask(mask, group, sp)


def apply_mask(w, mask: PruneMask) -> np.ndarray:
    """Zero the pruned entries; kept entries are bit-identical to the input."""
    w = np.asarray(w)
    if w.shape != mask.mask.shape:
        raise MaskError(f"weight shape {w.shape} != mask shape {mask.mask.shape}")
    out = w.copy()
    out[mask.mask] = 0
    return out


def mask_stats(mask: PruneMask) -> SparsityReport:
    m = mask.mask
    nm_ok = None
    if mask.sparsity.nm is not None:
        n, mm = mask.sparsity.nm
        blocks = m.reshape(m.shape[0], -1, mm)
        nm_ok = bool((blocks.sum(axis=2) == mm - n).all())
    return SparsityReport(
        global_sparsity=float(m.mean()) if m.size else 0.0,
        per_row_pruned=[int(x) for x in m.sum(axis=1)],
        per_col_pruned=[int(x) for x in m.sum(axis=0)],
        nm_conformant=nm_ok,
    )


def mask_to_uint8(mask: PruneMask) -> np.ndarray:
    return mask.mask.astype(np.uint8)


def mask_from_uint8(arr: np.ndarray, group: GroupSpec, sp: SparsitySpec) -> PruneMask:
    return PruneMask(np.asarray(arr) != 0, group, sp)
