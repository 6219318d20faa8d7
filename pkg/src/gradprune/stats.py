"""Streaming per-layer calibration statistics.

Per-sample gradients and activation rows are folded into fixed-size
accumulators (absolute / squared / signed gradient sums and squared
activation column sums). The sums are sufficient statistics for every
gradient aggregation the metrics need, so the full per-sample gradient
tensor is never materialized. Accumulation is always in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gradprune.container import Container

GRAD_AGGREGATIONS = ("acc", "l1", "l2")

# record-name suffixes appended to the owning weight's container name
STAT_SUFFIXES = (".grad_abs_sum", ".grad_sq_sum", ".grad_sum", ".act_sq_sum")
N_SAMPLES_KEY = "calib.n_samples"
N_ACT_ROWS_KEY = "calib.n_act_rows"


class StatsError(ValueError):
    pass


def _first_nonfinite(a: np.ndarray):
    bad = ~np.isfinite(a)
    if bad.any():
        return tuple(int(i) for i in np.argwhere(bad)[0])
    return None


@dataclass
class LayerStats:
    """Accumulators for one weight matrix of shape (d_out, d_in)."""

    d_out: int
    d_in: int
    grad_abs_sum: np.ndarray = field(repr=False, default=None)
    grad_sq_sum: np.ndarray = field(repr=False, default=None)
    grad_sum: np.ndarray = field(repr=False, default=None)
    act_sq_sum: np.ndarray = field(repr=False, default=None)
    n_samples: int = 0
    n_act_rows: int = 0

    def __post_init__(self):
        if self.d_out < 1 or self.d_in < 1:
            raise StatsError(f"dimensions must be positive, got ({self.d_out}, {self.d_in})")
        shape = (self.d_out, self.d_in)
        if self.grad_abs_sum is None:
            self.grad_abs_sum = np.zeros(shape)
        if self.grad_sq_sum is None:
            self.grad_sq_sum = np.zeros(shape)
        if self.grad_sum is None:
            self.grad_sum = np.zeros(shape)
        if self.act_sq_sum is None:
            self.act_sq_sum = np.zeros(self.d_in)
        for name in ("grad_abs_sum", "grad_sq_sum", "grad_sum"):
            if getattr(self, name).shape != shape:
                raise StatsError(f"{name} must have shape {shape}")
        if self.act_sq_sum.shape != (self.d_in,):
            raise StatsError(f"act_sq_sum must have shape ({self.d_in},)")

    def accumulate_gradient(self, g_sample) -> None:
        """Fold one per-sample gradient matrix into the sums.

        The whole sample is rejected (no partial update) on shape mismatch
        or any non-finite entry.
        """
        g = np.asarray(g_sample, dtype=np.float64)
        if g.shape != (self.d_out, self.d_in):
            raise StatsError(f"gradient shape {g.shape} != ({self.d_out}, {self.d_in})")
        bad = _first_nonfinite(g)
        if bad is not None:
            raise StatsError(f"non-finite gradient entry at index {bad}")
        self.grad_abs_sum += np.abs(g)
        self.grad_sq_sum += g * g
        self.grad_sum += g
        self.n_samples += 1

    def accumulate_activations(self, x_rows) -> None:
        """Fold a batch of layer-input rows into the squared column sums."""
        x = np.asarray(x_rows, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise StatsError(f"activation batch shape {x.shape} incompatible with d_in={self.d_in}")
        bad = _first_nonfinite(x)
        if bad is not None:
            raise StatsError(f"non-finite activation entry at index {bad}")
        self.act_sq_sum += (x * x).sum(axis=0)
        self.n_act_rows += x.shape[0]

    def grad_norm(self, p: str) -> np.ndarray:
        """Per-weight gradient magnitude aggregated over samples.

        p = "l1": sum of absolute values; "l2": root of sum of squares;
        "acc": absolute value of the signed sum. Raw sums, never divided
        by the sample count.
        """
        if self.n_samples < 1:
            raise StatsError("grad_norm requires at least one accumulated sample")
        if p == "l1":
            return self.grad_abs_sum.copy()
        if p == "l2":
            return np.sqrt(self.grad_sq_sum)
        if p == "acc":
            return np.abs(self.grad_sum)
        raise StatsError(f"unknown gradient aggregation {p!r}; expected one of {GRAD_AGGREGATIONS}")

    def act_norm(self) -> np.ndarray:
        """Column-wise l2 norm of all accumulated activation rows."""
        if self.n_act_rows < 1:
            raise StatsError("act_norm requires at least one accumulated activation row")
        return np.sqrt(self.act_sq_sum)

    def merge(self, other: "LayerStats") -> "LayerStats":
        """Field-wise sum of two accumulators over disjoint sample sets."""
        if (other.d_out, other.d_in) != (self.d_out, self.d_in):
            raise StatsError("cannot merge stats with different shapes")
        return LayerStats(
            self.d_out,
            self.d_in,
            grad_abs_sum=self.grad_abs_sum + other.grad_abs_sum,
            grad_sq_sum=self.grad_sq_sum + other.grad_sq_sum,
            grad_sum=self.grad_sum + other.grad_sum,
            act_sq_sum=self.act_sq_sum + other.act_sq_sum,
            n_samples=self.n_samples + other.n_samples,
            n_act_rows=self.n_act_rows + other.n_act_rows,
        )

    def validate(self) -> None:
        """Check the cross-field invariants (useful on imported containers)."""
        if (self.grad_sq_sum < 0).any():
            raise StatsError("grad_sq_sum has negative entries")
        if (self.act_sq_sum < 0).any():
            raise StatsError("act_sq_sum has negative entries")
        tol = 1e-9 * (1.0 + self.grad_abs_sum)
        if (np.abs(self.grad_sum) > self.grad_abs_sum + tol).any():
            raise StatsError("|grad_sum| exceeds grad_abs_sum")


def new_stats(d_out: int, d_in: int) -> LayerStats:
    return LayerStats(d_out, d_in)


def stats_to_container(stats_by_layer: dict[str, LayerStats]) -> Container:
    """Serialize stats keyed by weight name using the shared naming scheme.

    Records per layer: "<weight>.grad_abs_sum" etc.; the sample count is a
    single float64 scalar shared by all layers.
    """
    if not stats_by_layer:
        raise StatsError("no layer stats to serialize")
    counts = {s.n_samples for s in stats_by_layer.values()}
    if len(counts) != 1:
        raise StatsError(f"layers disagree on n_samples: {sorted(counts)}")
    act_rows = {s.n_act_rows for s in stats_by_layer.values()}

    c = Container()
    for name, s in stats_by_layer.items():
        c.add(name + ".grad_abs_sum", s.grad_abs_sum)
        c.add(name + ".grad_sq_sum", s.grad_sq_sum)
        c.add(name + ".grad_sum", s.grad_sum)
        c.add(name + ".act_sq_sum", s.act_sq_sum)
    c.add(N_SAMPLES_KEY, np.array([float(counts.pop())]))
    if len(act_rows) == 1:
        c.add(N_ACT_ROWS_KEY, np.array([float(act_rows.pop())]))
    return c


def stats_from_container(c: Container) -> dict[str, LayerStats]:
    """Rebuild per-layer stats from a container.

    When the optional activation row count record is absent (a foreign
    producer), n_act_rows falls back to n_samples: each calibration sample
    contributes at least one activation row by construction.
    """
    if N_SAMPLES_KEY not in c:
        raise StatsError(f"stats container is missing {N_SAMPLES_KEY!r}")
    n_samples = int(round(float(c[N_SAMPLES_KEY].reshape(-1)[0])))
    if N_ACT_ROWS_KEY in c:
        n_act_rows = int(round(float(c[N_ACT_ROWS_KEY].reshape(-1)[0])))
    else:
        n_act_rows = n_samples

    layers = {}
    for name in c.names():
        if not name.endswith(".grad_abs_sum"):
            continue
        base = name[: -len(".grad_abs_sum")]
        missing = [base + sfx for sfx in STAT_SUFFIXES if base + sfx not in c]
        if missing:
            raise StatsError(f"stats for {base!r} incomplete; missing {missing}")
        grad_abs = np.asarray(c[base + ".grad_abs_sum"], dtype=np.float64)
        if grad_abs.ndim != 2:
            raise StatsError(f"{base}.grad_abs_sum must be a matrix")
        d_out, d_in = grad_abs.shape
        s = LayerStats(
            d_out,
            d_in,
            grad_abs_sum=grad_abs,
            grad_sq_sum=np.asarray(c[base + ".grad_sq_sum"], dtype=np.float64),
            grad_sum=np.asarray(c[base + ".grad_sum"], dtype=np.float64),
            act_sq_sum=np.asarray(c[base + ".act_sq_sum"], dtype=np.float64).reshape(-1),
            n_samples=n_samples,
            n_act_rows=n_act_rows,
        )
        s.validate()
        layers[base] = s
    if not layers:
        raise StatsError("container holds no layer statistics records")
    return layers
