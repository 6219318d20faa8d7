"""Oracle suite certifying the saliency kernel and the toy model.

Each check recomputes a quantity through an independent route (direct
substitution, sampled perturbations, finite differences, two-pass sums)
and compares against the closed-form implementation. The suite fails
fast: the first violated invariant stops the run and names itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from gradprune import obs
from gradprune.container import Container, read_container, write_container
from gradprune.stats import new_stats
from gradprune.toylm import ToyConfig, ToyModel, backward, forward, gen_corpus, init_model, perplexity


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.measured = float(self.measured)
        self.tolerance = float(self.tolerance)

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "measured": self.measured,
            "tolerance": self.tolerance,
            "detail": self.detail,
        }


def _random_model(rng, n, grad_scale=1.0):
    a = rng.standard_normal((n + 3, n))
    return obs.QuadModel(
        w=rng.standard_normal(n),
        g=grad_scale * rng.standard_normal(n),
        hessian=a.T @ a + 0.1 * np.eye(n),
    )


def check_obs_substitution(rng) -> CheckResult:
    worst_gap = 0.0
    worst_constraint = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 17))
        model = _random_model(rng, n)
        m = int(rng.integers(0, n))
        sol = obs.obs_delta_e_full(model, m)
        worst_gap = max(worst_gap, abs(sol.delta_e - model.objective(sol.delta_w)))
        worst_constraint = max(worst_constraint, abs(model.w[m] + sol.delta_w[m]))
    passed = worst_gap < 1e-10 and worst_constraint < 1e-10
    return CheckResult("obs_closed_form_substitution", passed, max(worst_gap, worst_constraint), 1e-10,
                       "exact saliency vs direct objective evaluation at the returned update")


def check_obs_optimality(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        n = 6
        model = _random_model(rng, n)
        m = int(rng.integers(0, n))
        sol = obs.obs_delta_e_full(model, m)
        for _ in range(100):
            v = rng.standard_normal(n) * rng.choice([1e-3, 1e-1, 1.0])
            v[m] = 0.0
            undercut = sol.delta_e - model.objective(sol.delta_w + v)
            worst = max(worst, undercut)
    return CheckResult("obs_constrained_optimality", worst < 1e-12, worst, 1e-12,
                       "sampled feasible perturbations never beat the closed form")


def check_obs_zero_gradient(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 12))
        model = _random_model(rng, n, grad_scale=0.0)
        h_inv = np.linalg.inv(model.hessian)
        for m in range(n):
            full = obs.obs_delta_e_full(model, m).delta_e
            first = obs.obs_delta_e_first_order(model, m)
            classic = model.w[m] ** 2 / (2.0 * h_inv[m, m])
            worst = max(worst, abs(full - first), abs(full - classic))
    return CheckResult("obs_zero_gradient_collapse", worst < 1e-12, worst, 1e-12,
                       "zero gradient reduces the extended saliency to the classic one")


def check_obs_diagonal_chain(rng) -> CheckResult:
    worst = 0.0
    for _ in range(20):
        n = 8
        x_norms = rng.uniform(0.5, 2.0, size=n)
        model = obs.QuadModel(
            w=rng.standard_normal(n),
            g=0.01 * rng.standard_normal(n),
            hessian=2.0 * np.diag(x_norms**2),
        )
        for m in range(n):
            first = obs.obs_delta_e_first_order(model, m)
            shortcut = obs.obs_delta_e_diag(model.w[m], x_norms[m], model.g[m])
            worst = max(worst, abs(first - shortcut))
    return CheckResult("obs_diagonal_chain", worst < 1e-12, worst, 1e-12,
                       "diagonal curvature equals the (w*|x|)^2 - w*g shortcut")


def check_obs_quadratic_scaling(rng) -> CheckResult:
    model0 = _random_model(rng, 8)
    g0 = rng.standard_normal(8)
    scales = [1e-1, 1e-2, 1e-3, 1e-4]
    gaps = []
    for c in scales:
        model = obs.QuadModel(w=model0.w, g=c * g0, hessian=model0.hessian)
        gaps.append(abs(obs.obs_delta_e_full(model, 3).delta_e - obs.obs_delta_e_first_order(model, 3)))
    slope = float(np.polyfit(np.log(scales), np.log(gaps), 1)[0])
    return CheckResult("obs_quadratic_scaling", 1.8 <= slope <= 2.2, slope, 0.2,
                       "log-log slope of |exact - truncated| vs gradient scale, target 2.0")


def check_obs_weight_update(rng) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((20, 8))
        w = rng.standard_normal(8)
        mask = np.zeros(8, dtype=bool)
        mask[rng.permutation(8)[:4]] = True
        updated = obs.obs_weight_update(w, mask, x.T @ x)
        target = x @ w
        kept = ~mask
        coef, *_ = np.linalg.lstsq(x[:, kept], target, rcond=None)
        worst = max(worst, float(np.abs(updated[kept] - coef).max()))
        if np.linalg.norm(x @ updated - target) > np.linalg.norm(x @ (w * kept) - target) + 1e-12:
            return CheckResult("obs_weight_update", False, np.inf, 1e-9,
                               "update increased reconstruction error")
    return CheckResult("obs_weight_update", worst < 1e-9, worst, 1e-9,
                       "kept-submatrix solve vs generic least squares")


def check_toy_finite_difference(rng) -> CheckResult:
    cfg = ToyConfig(seed=3)
    model = init_model(cfg)
    corpus = gen_corpus(cfg, "train", n_tokens=256)
    starts = np.arange(64)
    windows = corpus.tokens[starts[:, None] + np.arange(cfg.context)]
    targets = corpus.tokens[starts + cfg.context]
    grads = backward(model, windows, targets)

    step = 1e-5
    # a central difference at this step resolves ~1e-10 absolute on a
    # unit-scale loss, so flooring the denominator at 1e-3 keeps the
    # relative comparison meaningful for near-zero coordinates
    floor = 1e-3
    worst = 0.0
    for arr, g in ((model.w1, grads.w1), (model.b1, grads.b1),
                   (model.w2, grads.w2), (model.b2, grads.b2)):
        flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
        for idx in rng.choice(flat.size, size=min(13, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + step
            up = float(forward(model, windows, targets).nll.mean())
            flat[idx] = orig - step
            down = float(forward(model, windows, targets).nll.mean())
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), floor))
    return CheckResult("toy_finite_difference", worst < 1e-6, worst, 1e-6,
                       "central differences vs analytic gradients, 50+ coordinates")


def check_toy_batch_additivity(rng) -> CheckResult:
    cfg = ToyConfig(seed=5)
    model = init_model(cfg)
    corpus = gen_corpus(cfg, "train", n_tokens=128)
    starts = np.arange(16)
    windows = corpus.tokens[starts[:, None] + np.arange(cfg.context)]
    targets = corpus.tokens[starts + cfg.context]
    whole = backward(model, windows, targets)
    worst = 0.0
    acc = {k: 0.0 for k in ("w1", "b1", "w2", "b2")}
    for i in range(16):
        g = backward(model, windows[i : i + 1], targets[i : i + 1])
        for k in acc:
            acc[k] = acc[k] + getattr(g, k)
    for k in acc:
        worst = max(worst, float(np.abs(getattr(whole, k) - acc[k] / 16).max()))
    return CheckResult("toy_batch_additivity", worst < 1e-12, worst, 1e-12,
                       "batch gradient equals the mean of per-example gradients")


def check_toy_uniform_perplexity(rng) -> CheckResult:
    cfg = ToyConfig(seed=7)
    base = init_model(cfg)
    zero = ToyModel(embed=base.embed, w1=np.zeros_like(base.w1), b1=np.zeros_like(base.b1),
                    w2=np.zeros_like(base.w2), b2=np.zeros_like(base.b2))
    ppl = perplexity(zero, gen_corpus(cfg, "eval", n_tokens=2048), cfg)
    gap = abs(ppl - cfg.vocab) / cfg.vocab
    return CheckResult("toy_uniform_perplexity", gap < 1e-9, gap, 1e-9,
                       "all-zero parameters predict uniformly")


def check_stats_two_pass(rng) -> CheckResult:
    samples = rng.standard_normal((128, 6, 7))
    s = new_stats(6, 7)
    for g in samples:
        s.accumulate_gradient(g)
    direct = (samples.astype(np.float64) ** 2).sum(axis=0)
    denom = np.maximum(np.abs(direct), 1e-300)
    worst = float((np.abs(s.grad_sq_sum - direct) / denom).max())
    return CheckResult("stats_two_pass_sums", worst < 1e-12, worst, 1e-12,
                       "streamed squared sums vs one-shot summation")


def check_container_round_trip(rng, tmp_dir) -> CheckResult:
    import os

    path = os.path.join(tmp_dir, "verify_rt.st")
    for i in range(10):
        c = Container()
        c.add("w", rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
        c.add("m", (rng.random((3, 3)) > 0.5).astype(np.uint8))
        write_container(c, path)
        back = read_container(path)
        for name in c.names():
            if back[name].tobytes() != c[name].tobytes():
                return CheckResult("container_round_trip", False, 1.0, 0.0, f"record {name} changed")
    return CheckResult("container_round_trip", True, 0.0, 0.0, "write-read byte identity")


def run_verification(seed: int = 0, tmp_dir: str = ".", fail_fast: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [
        check_obs_substitution,
        check_obs_optimality,
        check_obs_zero_gradient,
        check_obs_diagonal_chain,
        check_obs_quadratic_scaling,
        check_obs_weight_update,
        check_toy_finite_difference,
        check_toy_batch_additivity,
        check_toy_uniform_perplexity,
        check_stats_two_pass,
    ]
    results = []
    for fn in checks:
        started = time.time()
        result = fn(rng)
        result.detail += f" [{time.time() - started:.2f}s]"
        results.append(result)
        if fail_fast and not result.passed:
            return results
    results.append(check_container_round_trip(rng, tmp_dir))
    return results
