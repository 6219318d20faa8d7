"""Export CLI: checkpoint + calibration data in, one container out."""

from __future__ import annotations

import argparse
import json
import sys

from hfexport.export import DEFAULT_SKIP, ExportError, ExportManifest, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfexport", description=__doc__)
    parser.add_argument("--model", required=True, help="checkpoint path or identifier")
    parser.add_argument("--calib", required=True,
                        help="calibration source: .json / .npz token ids, or a text file")
    parser.add_argument("--n", type=int, default=128, help="number of calibration sequences")
    parser.add_argument("--seq-len", type=int, default=2048)
    parser.add_argument("--out", required=True, help="output container path")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--skip", action="append", default=None,
                        help="substring of layer names to exclude (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = ExportManifest(
        model_path=args.model,
        calib_source=args.calib,
        out_path=args.out,
        n_calib_sequences=args.n,
        seq_len=args.seq_len,
        seed=args.seed,
        device=args.device,
        skip_substrings=tuple(args.skip) if args.skip else DEFAULT_SKIP,
    )
    tokenizer = None
    if not (args.calib.endswith(".json") or args.calib.endswith(".npz")):
        from transformers import AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(args.model)
    try:
        out = export(manifest, tokenizer=tokenizer)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({
        "out": out,
        "n_calib_sequences": manifest.n_calib_sequences,
        "seq_len": manifest.seq_len,
        "layers": sorted(manifest.layer_names.values()),
    }, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
