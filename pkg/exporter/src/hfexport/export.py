"""Calibration export: stream per-sequence gradients and layer-input
activations from a causal-LM checkpoint into the pruning engine's
sufficient statistics.

One backward pass per calibration sequence, with language modeling on the
sequence itself as the objective. Only the aggregated sums ever exist:
absolute / squared / signed gradient sums per weight and squared column
sums of each linear layer's input, all accumulated in float64. The full
per-sequence gradient tensor for a billion-parameter checkpoint would be
petabyte-scale; the three sums are lossless for every aggregation the
engine's metrics use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from hfexport.stformat import write_tensors

DEFAULT_SKIP = ("embed", "lm_head")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    model_path: str
    calib_source: str
    out_path: str
    n_calib_sequences: int = 128
    seq_len: int = 2048
    seed: int = 0
    device: str = "cpu"
    skip_substrings: tuple[str, ...] = DEFAULT_SKIP
    # framework module name -> container record name, filled at load time
    layer_names: dict[str, str] = field(default_factory=dict)


def container_name(module_name: str) -> str:
    """Map a framework module path to the engine's record convention."""
    name = module_name
    if name.startswith("model."):
        name = name[len("model."):]
    return name + ".weight"


def eligible_linears(model: nn.Module, skip_substrings=DEFAULT_SKIP) -> list[tuple[str, nn.Linear]]:
    """All prunable linear layers: every nn.Linear whose name avoids the
    skip list (embedding and classification head by default)."""
    out = []
    for name, module in model.named_modules():
        if not isinstance(module, nn.Linear):
            continue
        if any(frag in name for frag in skip_substrings):
            continue
        out.append((name, module))
    if not out:
        raise ExportError("checkpoint has no eligible linear layers to export")
    return out


def load_calibration_ids(source: str, n_sequences: int, seq_len: int, seed: int,
                         tokenizer=None, vocab_size: int | None = None) -> torch.Tensor:
    """Calibration token ids, shape (n_sequences, seq_len).

    Accepts a JSON file with a list of token-id lists, an .npz with an
    "input_ids" array, or (with a tokenizer) a plain text file sampled at
    random windows.
    """
    if source.endswith(".json"):
        with open(source) as f:
            rows = json.load(f)
        ids = torch.tensor(rows, dtype=torch.long)
    elif source.endswith(".npz"):
        ids = torch.from_numpy(np.load(source)["input_ids"]).long()
    else:
        if tokenizer is None:
            raise ExportError(
                "text calibration needs a tokenizer; pass pre-tokenized ids (.json/.npz) instead"
            )
        with open(source) as f:
            text = f.read()
        all_ids = tokenizer(text, return_tensors="pt").input_ids[0]
        if all_ids.numel() < seq_len + 1:
            raise ExportError(f"calibration text has only {all_ids.numel()} tokens, need > {seq_len}")
        rng = np.random.default_rng(seed)
        starts = rng.integers(0, all_ids.numel() - seq_len, size=n_sequences)
        ids = torch.stack([all_ids[s : s + seq_len] for s in starts])

    if ids.ndim != 2:
        raise ExportError(f"calibration ids must be 2-D, got shape {tuple(ids.shape)}")
    if ids.shape[0] < n_sequences:
        raise ExportError(f"requested {n_sequences} sequences but source has {ids.shape[0]}")
    ids = ids[:n_sequences, :seq_len]
    if ids.shape[1] < seq_len:
        raise ExportError(f"sequences are {ids.shape[1]} tokens, need {seq_len}")
    if vocab_size is not None and int(ids.max()) >= vocab_size:
        raise ExportError(f"token id {int(ids.max())} outside vocabulary of size {vocab_size}")
    return ids


class _LayerAccumulator:
    """Float64 running sums for one linear layer."""

    def __init__(self, name: str, module: nn.Linear):
        self.name = name
        d_out, d_in = module.weight.shape
        self.grad_abs_sum = np.zeros((d_out, d_in))
        self.grad_sq_sum = np.zeros((d_out, d_in))
        self.grad_sum = np.zeros((d_out, d_in))
        self.act_sq_sum = np.zeros(d_in)
        self.act_rows = 0

    def take_activation(self, x: torch.Tensor) -> None:
        rows = x.detach().reshape(-1, x.shape[-1]).to(torch.float64)
        self.act_sq_sum += (rows * rows).sum(dim=0).cpu().numpy()
        self.act_rows += rows.shape[0]

    def take_gradient(self, grad: torch.Tensor) -> None:
        g = grad.detach().to(torch.float64).cpu().numpy()
        self.grad_abs_sum += np.abs(g)
        self.grad_sq_sum += g * g
        self.grad_sum += g

    def validate(self) -> None:
        if self.act_rows == 0:
            raise ExportError(
                f"layer {self.name!r} captured no activations; its inputs never "
                "reached the forward hook"
            )
        if (self.grad_sq_sum < 0).any() or (self.act_sq_sum < 0).any():
            raise ExportError(f"layer {self.name!r} accumulated negative squared sums")
        tol = 1e-6 * (1.0 + self.grad_abs_sum)
        if (np.abs(self.grad_sum) > self.grad_abs_sum + tol).any():
            raise ExportError(f"layer {self.name!r}: |grad_sum| exceeds grad_abs_sum")


def export(manifest: ExportManifest, model=None, tokenizer=None) -> str:
    """Run calibration and write one container holding every eligible
    weight plus its statistics; returns the output path.

    The container serves as both the weights and the stats input of the
    pruning engine. Memory note: accumulators are float64 copies of each
    eligible weight matrix; export layer subsets (skip lists) if the
    checkpoint does not fit alongside them.
    """
    if model is None:
        from transformers import AutoModelForCausalLM

        model = AutoModelForCausalLM.from_pretrained(manifest.model_path, torch_dtype=torch.float32)
    device = torch.device(manifest.device)
    model.to(device)
    model.eval()

    layers = eligible_linears(model, manifest.skip_substrings)
    manifest.layer_names = {name: container_name(name) for name, _ in layers}
    accumulators = {name: _LayerAccumulator(name, module) for name, module in layers}

    hooks = []
    for name, module in layers:
        def make_hook(acc):
            def hook(_module, inputs):
                acc.take_activation(inputs[0])
            return hook
        hooks.append(module.register_forward_pre_hook(make_hook(accumulators[name])))

    vocab_size = model.get_input_embeddings().weight.shape[0]
    ids = load_calibration_ids(
        manifest.calib_source, manifest.n_calib_sequences, manifest.seq_len,
        manifest.seed, tokenizer=tokenizer, vocab_size=vocab_size,
    ).to(device)

    try:
        for i in range(manifest.n_calib_sequences):
            model.zero_grad(set_to_none=True)
            seq = ids[i : i + 1]
            out = model(input_ids=seq, labels=seq)
            out.loss.backward()
            for name, module in layers:
                if module.weight.grad is None:
                    raise ExportError(f"layer {name!r} received no gradient from the backward pass")
                accumulators[name].take_gradient(module.weight.grad)
    finally:
        for h in hooks:
            h.remove()
        model.zero_grad(set_to_none=True)

    records: dict[str, np.ndarray] = {}
    for name, module in layers:
        acc = accumulators[name]
        acc.validate()
        cname = manifest.layer_names[name]
        records[cname] = module.weight.detach().cpu().numpy().astype(np.float32)
        records[cname + ".grad_abs_sum"] = acc.grad_abs_sum
        records[cname + ".grad_sq_sum"] = acc.grad_sq_sum
        records[cname + ".grad_sum"] = acc.grad_sum
        records[cname + ".act_sq_sum"] = acc.act_sq_sum
    records["calib.n_samples"] = np.array([float(manifest.n_calib_sequences)])
    act_rows = {acc.act_rows for acc in accumulators.values()}
    if len(act_rows) == 1:
        records["calib.n_act_rows"] = np.array([float(act_rows.pop())])

    metadata = {
        "exporter": "hfexport",
        "model_path": str(manifest.model_path),
        "n_calib_sequences": str(manifest.n_calib_sequences),
        "seq_len": str(manifest.seq_len),
        "calib_source": str(manifest.calib_source),
        "seed": str(manifest.seed),
    }
    write_tensors(records, manifest.out_path, metadata=metadata)
    return manifest.out_path
