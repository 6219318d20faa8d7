"""Multi-seed desk-scale orderings: pairwise trends the full pipeline is
expected to reproduce, measured over the shared 10-seed toy runs."""

import numpy as np

from gradprune.masks import GroupSpec, SparsitySpec, build_mask
from gradprune.metrics import builtin_metric, score
from gradprune.toylm import TOY_WEIGHT_NAMES, perplexity

OUT1 = GroupSpec("output_1")
HALF = SparsitySpec(ratio=0.5)


def masks_for(run, metric_name, alpha, group=OUT1, sparsity=HALF):
    spec = builtin_metric(metric_name, alpha)
    model, stats = run["model"], run["stats"]
    return {
        name: build_mask(score(spec, w, stats[name]), group, sparsity)
        for name, w in ((TOY_WEIGHT_NAMES[0], model.w1), (TOY_WEIGHT_NAMES[1], model.w2))
    }


def ppl(run, masks):
    return perplexity(run["model"], run["eval"], run["cfg"], masks)


def test_gradient_term_beats_plain_wanda_on_majority(toy_runs):
    wins = sum(
        ppl(run, masks_for(run, "gblm-l1", 100.0)) <= ppl(run, masks_for(run, "wanda", 0.0))
        for run in toy_runs.values()
    )
    assert wins >= 6, f"gblm-l1 beat wanda on only {wins}/10 seeds"


def test_output_rows_beat_input_columns_on_majority(toy_runs):
    wins = 0
    for run in toy_runs.values():
        by_row = ppl(run, masks_for(run, "gblm-l1", 100.0, group=GroupSpec("output_1")))
        by_col = ppl(run, masks_for(run, "gblm-l1", 100.0, group=GroupSpec("input_1")))
        wins += by_row <= by_col
    assert wins >= 6, f"output,1 beat input,1 on only {wins}/10 seeds"


def test_nm_constraint_ordering(toy_runs):
    stricter_worse = 0
    relaxation_helps = 0
    for run in toy_runs.values():
        unstructured = ppl(run, masks_for(run, "gblm-l1", 100.0))
        two_four = ppl(run, masks_for(run, "gblm-l1", 100.0, sparsity=SparsitySpec(nm=(2, 4))))
        four_eight = ppl(run, masks_for(run, "gblm-l1", 100.0, sparsity=SparsitySpec(nm=(4, 8))))
        stricter_worse += two_four >= unstructured
        relaxation_helps += four_eight <= two_four
    assert stricter_worse == 10, f"2:4 was no worse than unstructured on only {stricter_worse}/10 seeds"
    assert relaxation_helps >= 9, f"4:8 beat 2:4 on only {relaxation_helps}/10 seeds"


def test_structure_ratio_above_null_for_gradient_masks(toy_runs):
    from gradprune.viz import structure_report

    above = 0
    for run in toy_runs.values():
        ratios = [
            structure_report(m).excess_variance_ratio
            for m in masks_for(run, "gblm-l1", 100.0).values()
        ]
        above += np.mean(ratios) > 1.5
    assert above >= 8, f"gradient masks showed column structure on only {above}/10 seeds"
