"""Command-line surface: prune, verify, sweeps, visualization, and the
toy-model pipeline. All numeric logic lives in the library modules; the
CLI parses flags, moves containers around, and emits JSON reports.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from gradprune import obs
from gradprune.container import Container, ContainerFormatError, read_container, write_container
from gradprune.masks import GroupSpec, MaskError, SparsitySpec, build_mask, mask_from_uint8, mask_stats, mask_to_uint8
from gradprune.metrics import (
    BUILTIN_METRICS,
    DEFAULT_ALPHA,
    DEFAULT_METRIC,
    DEFAULT_SKIP_LIST,
    MetricError,
    MetricSpec,
    builtin_metric,
    eligible_weights,
    metric_from_json,
    score,
)
from gradprune.stats import StatsError, stats_from_container, stats_to_container
from gradprune.toylm import (
    TOY_WEIGHT_NAMES,
    ToyConfig,
    ToyError,
    calibrate,
    export_model,
    gen_corpus,
    init_model,
    model_from_container,
    perplexity,
    train,
)
from gradprune.verify import run_verification
from gradprune.viz import VizError, render_mask_pgm, structure_report

USAGE_ERROR = 2
VERIFY_ERROR = 1

_INPUT_ERRORS = (
    ContainerFormatError,
    StatsError,
    MetricError,
    MaskError,
    VizError,
    ToyError,
    obs.SingularHessianError,
    FileNotFoundError,
    IsADirectoryError,
)


@dataclass
class RunConfig:
    tensors_path: str
    stats_path: str
    metric: str = DEFAULT_METRIC
    alpha: float = DEFAULT_ALPHA
    metric_json: str | None = None
    group: GroupSpec = GroupSpec("output_1")
    sparsity: SparsitySpec = SparsitySpec(ratio=0.5)
    skip_list: tuple[str, ...] = DEFAULT_SKIP_LIST
    out_masks: str | None = None
    report_path: str | None = None
    seed: int = 0
    workers: int = 1

    def metric_spec(self) -> MetricSpec:
        if self.metric_json is not None:
            with open(self.metric_json) as f:
                return metric_from_json(f.read())
        return builtin_metric(self.metric, self.alpha)


def _emit(report: dict, path: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    print(text)


def _toy_masks_from_container(mask_container: Container) -> dict:
    masks = {}
    for name in mask_container.names():
        if not name.endswith(".mask"):
            continue
        base = name[: -len(".mask")]
        meta = mask_container.metadata or {}
        group = GroupSpec.parse(meta.get("group", "output,1"))
        sparsity = SparsitySpec.parse(meta.get("sparsity", "0.5"))
        masks[base] = mask_from_uint8(mask_container[name], group, sparsity)
    return masks


def cmd_prune(cfg: RunConfig) -> dict:
    timing = {}
    started = time.time()
    spec = cfg.metric_spec()

    t0 = time.time()
    weights = read_container(cfg.tensors_path)
    stats_by_layer = stats_from_container(read_container(cfg.stats_path))
    timing["load"] = time.time() - t0

    names = eligible_weights(weights, cfg.skip_list)
    if not names:
        raise MetricError("no eligible weight records to prune")
    missing = [n for n in names if n not in stats_by_layer]
    if missing:
        raise MetricError(f"no calibration stats for weights: {missing}")

    def prune_one(name):
        scores = score(spec, weights[name], stats_by_layer[name])
        mask = build_mask(scores, cfg.group, cfg.sparsity)
        return name, mask

    t0 = time.time()
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            produced = dict(pool.map(prune_one, names))
    else:
        produced = dict(prune_one(n) for n in names)
    timing["score_and_mask"] = time.time() - t0

    layer_reports = {}
    out = Container(
        metadata={
            "group": cfg.group.label(),
            "sparsity": cfg.sparsity.label(),
            "metric": json.dumps(spec.to_json_dict(), sort_keys=True),
        }
    )
    for name in names:  # container order, independent of worker scheduling
        mask = produced[name]
        out.add(name + ".mask", mask_to_uint8(mask))
        rep = mask_stats(mask)
        structure = None
        if cfg.group.kind == "output_1" and cfg.sparsity.ratio is not None:
            structure = structure_report(mask).excess_variance_ratio
        layer_reports[name] = {
            "shape": list(mask.mask.shape),
            "sparsity": rep.global_sparsity,
            "pruned": int(mask.mask.sum()),
            "nm_conformant": rep.nm_conformant,
            "excess_variance_ratio": structure,
        }

    t0 = time.time()
    if cfg.out_masks:
        write_container(out, cfg.out_masks)
    timing["write"] = time.time() - t0

    ppl = None
    toy_cfg = None
    try:
        _, toy_cfg = model_from_container(weights)
    except ToyError:
        pass
    if toy_cfg is not None:
        model, _ = model_from_container(weights)
        ev = gen_corpus(toy_cfg, "eval")
        toy_masks = {n: produced[n] for n in TOY_WEIGHT_NAMES if n in produced}
        ppl = {
            "dense": perplexity(model, ev, toy_cfg),
            "pruned": perplexity(model, ev, toy_cfg, masks=toy_masks),
        }
    timing["total"] = time.time() - started

    return {
        "metric": spec.to_json_dict(),
        "alpha": cfg.alpha,
        "group": cfg.group.label(),
        "sparsity": cfg.sparsity.label(),
        "seed": cfg.seed,
        "skip_list": list(cfg.skip_list),
        "layers": layer_reports,
        "perplexity": ppl,
        "timing_s": {k: round(v, 4) for k, v in timing.items()},
    }


def _toy_pipeline_masks(model, stats, spec, group, sparsity):
    masks = {}
    for name, w in ((TOY_WEIGHT_NAMES[0], model.w1), (TOY_WEIGHT_NAMES[1], model.w2)):
        masks[name] = build_mask(score(spec, w, stats[name]), group, sparsity)
    return masks


def cmd_sweep_alpha(seed, alphas, metric, n_calib, group, sparsity) -> dict:
    if not alphas:
        raise MetricError("alpha sweep needs at least one value")
    cfg = ToyConfig(seed=seed)
    model = train(cfg)
    ev = gen_corpus(cfg, "eval")
    stats = calibrate(model, cfg, n_calib)
    rows = []
    for alpha in alphas:
        spec = builtin_metric(metric, alpha)
        masks = _toy_pipeline_masks(model, stats, spec, group, sparsity)
        rows.append({"alpha": alpha, "perplexity": perplexity(model, ev, cfg, masks)})
    best = min(rows, key=lambda r: r["perplexity"])
    return {
        "seed": seed,
        "metric": metric,
        "n_calib": n_calib,
        "dense_perplexity": perplexity(model, ev, cfg),
        "rows": rows,
        "best_alpha": best["alpha"],
    }


def cmd_sweep_calib(seed, sizes, metric, alpha, group, sparsity, repeats=1) -> dict:
    if not sizes:
        raise MetricError("calibration sweep needs at least one size")
    cfg = ToyConfig(seed=seed)
    model = train(cfg)
    ev = gen_corpus(cfg, "eval")
    spec = builtin_metric(metric, alpha)
    rows = []
    for size in sizes:
        ppls = []
        for rep in range(repeats):
            stats = calibrate(model, cfg, size, start=rep * size)
            masks = _toy_pipeline_masks(model, stats, spec, group, sparsity)
            ppls.append(perplexity(model, ev, cfg, masks))
        rows.append(
            {
                "n_samples": size,
                "perplexity": ppls[0],
                "perplexity_mean": float(np.mean(ppls)),
                "perplexity_std": float(np.std(ppls)),
                "repeats": repeats,
            }
        )
    return {"seed": seed, "metric": metric, "alpha": alpha, "rows": rows}


def cmd_compare_groups(seed, metric, alpha, n_calib, ratio, block) -> dict:
    cfg = ToyConfig(seed=seed)
    for kind in ("output_block", "input_block"):
        limit = cfg.hidden_dim if kind == "output_block" else cfg.embed_dim
        if block > limit:
            raise MaskError(f"group ({kind.replace('_block', '')},{block}): block exceeds dimension {limit}")
    model = train(cfg)
    ev = gen_corpus(cfg, "eval")
    stats = calibrate(model, cfg, n_calib)
    spec = builtin_metric(metric, alpha)
    groups = [
        GroupSpec("layer"),
        GroupSpec("output_1"),
        GroupSpec("input_1"),
        GroupSpec("output_block", block),
        GroupSpec("input_block", block),
    ]
    rows = []
    for group in groups:
        masks = _toy_pipeline_masks(model, stats, spec, group, SparsitySpec(ratio=ratio))
        rows.append({"group": group.label(), "perplexity": perplexity(model, ev, cfg, masks)})
    winner = min(rows, key=lambda r: r["perplexity"])
    return {"seed": seed, "metric": metric, "alpha": alpha, "rows": rows, "winner": winner["group"]}


def cmd_verify(seed, mutate, tmp_dir=".") -> tuple[dict, bool]:
    if mutate == "third-term":
        obs.MUTATION_HOOKS["third_term_scale"] = 1.01
    try:
        results = run_verification(seed=seed, tmp_dir=tmp_dir)
    finally:
        obs.MUTATION_HOOKS["third_term_scale"] = 1.0
    ok = all(r.passed for r in results)
    report = {
        "passed": ok,
        "mutation": mutate,
        "checks": [r.to_json_dict() for r in results],
        "first_failure": next((r.name for r in results if not r.passed), None),
    }
    return report, ok


def cmd_stats_summary(path) -> dict:
    layers = stats_from_container(read_container(path))
    out = {}
    for name, s in layers.items():
        out[name] = {
            "d_out": s.d_out,
            "d_in": s.d_in,
            "n_samples": s.n_samples,
            "n_act_rows": s.n_act_rows,
            "grad_l1_mean": float(s.grad_norm("l1").mean()),
            "grad_l2_mean": float(s.grad_norm("l2").mean()),
            "act_norm_mean": float(s.act_norm().mean()),
        }
    return {"layers": out}


def cmd_viz(masks_path, layer, out_path, report_path) -> dict:
    container = read_container(masks_path)
    record = layer if layer.endswith(".mask") else layer + ".mask"
    if record not in container:
        raise VizError(f"mask record {record!r} not in {masks_path}; have {container.names()}")
    mask = _toy_masks_from_container(container)[record[: -len(".mask")]]
    render_mask_pgm(mask, out_path)
    report = {"layer": layer, "out": str(out_path), "sparsity": mask_stats(mask).global_sparsity}
    try:
        report["structure"] = structure_report(mask).to_json_dict()
    except VizError:
        report["structure"] = None
    if report_path:
        with open(report_path, "w") as f:
            json.dump(report, f, sort_keys=True, indent=2)
    return report


def _parse_float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _parse_int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    prune = sub.add_parser("prune", help="score weights, build masks, write report")
    prune.add_argument("--tensors", required=True)
    prune.add_argument("--stats", required=True)
    prune.add_argument("--metric", default=DEFAULT_METRIC, choices=sorted(BUILTIN_METRICS))
    prune.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    prune.add_argument("--metric-json", default=None, help="JSON file with a custom metric term list")
    prune.add_argument("--group", default="output,1", help="layer | output,N | input,N")
    prune.add_argument("--sparsity", default="0.5", help="ratio in [0,1] or n:m")
    prune.add_argument("--skip", action="append", default=None, help="substring of names to skip (repeatable)")
    prune.add_argument("--out-masks", default=None)
    prune.add_argument("--report", default=None)
    prune.add_argument("--seed", type=int, default=0)
    prune.add_argument("--workers", type=int, default=1)

    verify = sub.add_parser("verify", help="run the oracle suite")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--mutate", choices=["third-term"], default=None,
                        help="deliberately corrupt the closed form to prove detection")
    verify.add_argument("--report", default=None)

    sweep_a = sub.add_parser("sweep-alpha", help="toy perplexity per gradient scaling factor")
    sweep_a.add_argument("--seed", type=int, default=0)
    sweep_a.add_argument("--alphas", required=True, help="comma-separated list")
    sweep_a.add_argument("--metric", default=DEFAULT_METRIC)
    sweep_a.add_argument("--n-calib", type=int, default=128)
    sweep_a.add_argument("--group", default="output,1")
    sweep_a.add_argument("--sparsity", default="0.5")
    sweep_a.add_argument("--report", default=None)

    sweep_c = sub.add_parser("sweep-calib", help="toy perplexity per calibration set size")
    sweep_c.add_argument("--seed", type=int, default=0)
    sweep_c.add_argument("--sizes", required=True, help="comma-separated list")
    sweep_c.add_argument("--repeats", type=int, default=1)
    sweep_c.add_argument("--metric", default=DEFAULT_METRIC)
    sweep_c.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    sweep_c.add_argument("--group", default="output,1")
    sweep_c.add_argument("--sparsity", default="0.5")
    sweep_c.add_argument("--report", default=None)

    compare = sub.add_parser("compare-groups", help="toy perplexity per comparison group")
    compare.add_argument("--seed", type=int, default=0)
    compare.add_argument("--metric", default=DEFAULT_METRIC)
    compare.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    compare.add_argument("--n-calib", type=int, default=128)
    compare.add_argument("--ratio", type=float, default=0.5)
    compare.add_argument("--block", type=int, default=32)
    compare.add_argument("--report", default=None)

    viz = sub.add_parser("viz", help="render a mask as a PGM image")
    viz.add_argument("--mask", "--masks", dest="mask", required=True,
                     help="mask container written by prune")
    viz.add_argument("--layer", required=True)
    viz.add_argument("--out", required=True)
    viz.add_argument("--report", default=None)

    stats = sub.add_parser("stats", help="summarize a calibration stats container")
    stats.add_argument("--stats", required=True)

    toy = sub.add_parser("toy", help="toy model pipeline")
    toy_sub = toy.add_subparsers(dest="toy_command", required=True)

    toy_train = toy_sub.add_parser("train", help="train the deterministic toy model")
    toy_train.add_argument("--seed", type=int, default=0)
    toy_train.add_argument("--sgd-steps", type=int, default=None)
    toy_train.add_argument("--out", default=None, help="write the model container here")

    toy_export = toy_sub.add_parser("export", help="train, calibrate, and write weight + stats containers")
    toy_export.add_argument("--seed", type=int, default=0)
    toy_export.add_argument("--sgd-steps", type=int, default=None)
    toy_export.add_argument("--n-calib", type=int, default=128)
    toy_export.add_argument("--out-tensors", required=True)
    toy_export.add_argument("--out-stats", required=True)

    toy_eval = toy_sub.add_parser("eval", help="perplexity of a stored toy model")
    toy_eval.add_argument("--tensors", required=True)
    toy_eval.add_argument("--masks", default=None)
    toy_eval.add_argument("--split", default="eval", choices=["train", "eval"])

    return parser


def _toy_cfg(args) -> ToyConfig:
    cfg = ToyConfig(seed=args.seed)
    if getattr(args, "sgd_steps", None):
        cfg = replace(cfg, sgd_steps=args.sgd_steps)
    return cfg


def _dispatch(args) -> int:
    if args.command == "prune":
        cfg = RunConfig(
            tensors_path=args.tensors,
            stats_path=args.stats,
            metric=args.metric,
            alpha=args.alpha,
            metric_json=args.metric_json,
            group=GroupSpec.parse(args.group),
            sparsity=SparsitySpec.parse(args.sparsity),
            skip_list=tuple(args.skip) if args.skip else DEFAULT_SKIP_LIST,
            out_masks=args.out_masks,
            report_path=args.report,
            seed=args.seed,
            workers=args.workers,
        )
        _emit(cmd_prune(cfg), cfg.report_path)
        return 0

    if args.command == "verify":
        report, ok = cmd_verify(args.seed, args.mutate)
        _emit(report, args.report)
        return 0 if ok else VERIFY_ERROR

    if args.command == "sweep-alpha":
        report = cmd_sweep_alpha(
            args.seed, _parse_float_list(args.alphas), args.metric, args.n_calib,
            GroupSpec.parse(args.group), SparsitySpec.parse(args.sparsity),
        )
        _emit(report, args.report)
        return 0

    if args.command == "sweep-calib":
        report = cmd_sweep_calib(
            args.seed, _parse_int_list(args.sizes), args.metric, args.alpha,
            GroupSpec.parse(args.group), SparsitySpec.parse(args.sparsity), args.repeats,
        )
        _emit(report, args.report)
        return 0

    if args.command == "compare-groups":
        report = cmd_compare_groups(args.seed, args.metric, args.alpha, args.n_calib, args.ratio, args.block)
        _emit(report, args.report)
        return 0

    if args.command == "viz":
        report = cmd_viz(args.mask, args.layer, args.out, args.report)
        _emit(report, None)
        return 0

    if args.command == "stats":
        _emit(cmd_stats_summary(args.stats), None)
        return 0

    if args.command == "toy":
        if args.toy_command == "train":
            cfg = _toy_cfg(args)
            model = train(cfg)
            if args.out:
                write_container(export_model(model, cfg), args.out)
            ev = gen_corpus(cfg, "eval")
            _emit(
                {
                    "seed": cfg.seed,
                    "eval_perplexity": perplexity(model, ev, cfg),
                    "untrained_perplexity": perplexity(init_model(cfg), ev, cfg),
                    "out": args.out,
                },
                None,
            )
            return 0
        if args.toy_command == "export":
            cfg = _toy_cfg(args)
            model = train(cfg)
            stats = calibrate(model, cfg, args.n_calib)
            write_container(export_model(model, cfg), args.out_tensors)
            write_container(stats_to_container(stats), args.out_stats)
            _emit(
                {
                    "seed": cfg.seed,
                    "n_calib": args.n_calib,
                    "tensors": args.out_tensors,
                    "stats": args.out_stats,
                    "layers": list(TOY_WEIGHT_NAMES),
                },
                None,
            )
            return 0
        if args.toy_command == "eval":
            model, cfg = model_from_container(read_container(args.tensors))
            masks = None
            if args.masks:
                masks = _toy_masks_from_container(read_container(args.masks))
                masks = {k: v for k, v in masks.items() if k in TOY_WEIGHT_NAMES}
            corpus = gen_corpus(cfg, args.split)
            _emit({"split": args.split, "perplexity": perplexity(model, corpus, cfg, masks)}, None)
            return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except _INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
