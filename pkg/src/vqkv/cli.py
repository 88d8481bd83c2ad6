"""``vqkv`` command line: ratio, gen, train, compress, stats, bench.

Reports are written to stdout as one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import bench
from .cache import CacheState, WindowPolicy
from .errors import InvalidInputError, VQKVError
from .quantizer import CacheKind, CodebookStack, CodeMatrix, decode, encode
from .ratio import ABLATION_GRID, RatioConfig, format_ratio, ratio, round_ratio
from .synthetic import SyntheticSpec, gen_dataset
from .trainer import TrainConfig, VectorDataset, train

log = logging.getLogger("vqkv")


def _emit(record, out=None):
    out = out or sys.stdout
    out.write(json.dumps(record, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _ratio_record(cfg: RatioConfig, precise: bool) -> dict:
    value = ratio(cfg)
    return {"record": "ratio", **asdict(cfg),
            "ratio": value if precise else round_ratio(value, 1),
            "ratio_text": format_ratio(value, 6 if precise else 1)}


def _parse_config(text: str) -> RatioConfig:
    parts = [int(p) for p in text.replace(" ", "").split(",") if p]
    if len(parts) not in (4, 6):
        raise InvalidInputError(f"--config needs 'nk,sk,nv,sv[,dk,dv]', got {text!r}")
    return RatioConfig(*parts)


def _parse_stages(text: str):
    try:
        sizes = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise InvalidInputError(f"--stages must be comma-separated integers, got {text!r}") from None
    if not sizes:
        raise InvalidInputError("--stages is empty")
    return sizes


def _load_spec(text: str) -> SyntheticSpec:
    path = Path(text)
    raw = path.read_text() if path.exists() else text
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"--spec is neither a JSON file nor JSON text: {exc}") from None
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(data) - known
    if unknown:
        raise InvalidInputError(f"unknown spec fields {sorted(unknown)}")
    return SyntheticSpec(**data)


def cmd_ratio(args):
    _emit(_ratio_record(RatioConfig(args.nk, args.sk, args.nv, args.sv, args.dk, args.dv), args.precise))


def cmd_gen(args):
    spec = SyntheticSpec(kind=args.kind, dim=args.dim, count=args.count,
                         component_count=args.components, seed=args.seed, rope_base=args.rope_base,
                         mean_scale=args.mean_scale, noise_scale=args.noise_scale)
    dataset = gen_dataset(spec, args.out)
    _emit({"record": "dataset", "path": str(args.out), "dim": dataset.dim, "count": dataset.count,
           **{k: v for k, v in asdict(spec).items() if k not in ("dim", "count")}})


def cmd_train(args):
    dataset = VectorDataset.load(args.data)
    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
                         beta=args.beta, gamma=args.gamma, seed=args.seed, init_scale=args.init_scale,
                         square_commitment=args.square_commitment, train_entries=args.train_entries)
    stack, report = train(dataset, _parse_stages(args.stages), config, CacheKind.parse(args.kind),
                          progress=lambda e, v: log.info("epoch %d loss %.6g", e, v))
    stack.save(args.out)
    for record in report.lines():
        _emit(record)
    _emit({"record": "stack", "path": str(args.out), "hash": stack.content_hash(),
           "sizes": list(stack.sizes), "dim": stack.dim})


def cmd_compress(args):
    dataset = VectorDataset.load(args.data)
    stack = CodebookStack.load(args.stack)
    if stack.dim != dataset.dim:
        raise InvalidInputError(f"dataset dimension {dataset.dim} does not match stack {stack.dim}")
    codes = CodeMatrix.for_stack(stack)
    sq_err = 0.0
    chunk = 1 << 14
    for start in range(0, dataset.count, chunk):
        xs = np.asarray(dataset.vectors[start:start + chunk], dtype=np.float64)
        c, _ = encode(stack, xs, args.block_size)
        codes.append(c)
        sq_err += float(np.square(xs - decode(stack, c)).sum())
    codes.save(args.out)
    _emit({"record": "compress", "path": str(args.out), "rows": len(codes),
           "payload_bits": codes.payload_bits, "mse": sq_err / dataset.count})


def cmd_stats(args):
    if args.snapshot:
        if not (args.key_stack and args.value_stack):
            raise InvalidInputError("--snapshot needs --key-stack and --value-stack")
        state = CacheState.load(args.snapshot, CodebookStack.load(args.key_stack),
                                CodebookStack.load(args.value_stack))
        report = state.memory_report()
        _emit({"record": "memory", "tokens": state.total_len, **state.segment_lengths(),
               **report.as_record()})
        ks, vs = state.key_stack, state.value_stack
        if min(ks.sizes + vs.sizes) >= 2:
            cfg = RatioConfig(ks.n_stages, max(ks.sizes), vs.n_stages, max(vs.sizes), ks.dim, vs.dim)
            _emit(_ratio_record(cfg, args.precise))
        return
    configs = [_parse_config(c) for c in args.config or []]
    if args.table or not configs:
        configs += [RatioConfig(*row, args.dk, args.dv) for row in ABLATION_GRID]
    for cfg in configs:
        _emit(_ratio_record(cfg, args.precise))


def cmd_bench(args):
    spec = _load_spec(args.spec)
    policy = WindowPolicy(args.linit, args.llocal, batched=not args.eager)
    config = bench.BenchConfig(tokens=args.tokens, prompt=args.prompt, checkpoints=args.checkpoints,
                               queries=args.queries, block_rows=args.block_rows,
                               query_seed=args.query_seed, fidelity=not args.no_fidelity,
                               budget_bytes=args.budget_bytes,
                               snapshot_path=args.save_snapshot)
    for record in bench.run(spec, CodebookStack.load(args.key_stack),
                            CodebookStack.load(args.value_stack), policy, config):
        _emit(record)
        sys.stdout.flush()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqkv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ratio", help="compression ratio of one codebook configuration")
    p.add_argument("--nk", type=int, required=True)
    p.add_argument("--sk", type=int, required=True)
    p.add_argument("--nv", type=int, required=True)
    p.add_argument("--sv", type=int, required=True)
    p.add_argument("--dk", type=int, default=128)
    p.add_argument("--dv", type=int, default=128)
    p.add_argument("--precise", action="store_true", help="full precision instead of one decimal")
    p.set_defaults(func=cmd_ratio)

    p = sub.add_parser("gen", help="write a synthetic VECD dataset")
    p.add_argument("--kind", default="gaussian_mixture", choices=["gaussian_mixture", "rope_rotated_keys"])
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--components", type=int, default=32)
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--mean-scale", type=float, default=1.0)
    p.add_argument("--noise-scale", type=float, default=0.25)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an RSVQ codebook stack")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stages", required=True, help="comma-separated codebook sizes, one per stage")
    p.add_argument("--kind", default="key", choices=["key", "value"])
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=65536)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--beta", type=float, default=0.25)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--square-commitment", action="store_true")
    p.add_argument("--train-entries", action="store_true", help="also update raw entries")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="encode a dataset into a packed code matrix")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--stack", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--block-size", type=int, default=4096)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("stats", help="ratio table or memory report of a cache snapshot")
    p.add_argument("--config", action="append", help="nk,sk,nv,sv[,dk,dv]; repeatable")
    p.add_argument("--table", action="store_true", help="include the codebook ablation grid")
    p.add_argument("--snapshot", type=Path)
    p.add_argument("--key-stack", type=Path)
    p.add_argument("--value-stack", type=Path)
    p.add_argument("--dk", type=int, default=128)
    p.add_argument("--dv", type=int, default=128)
    p.add_argument("--precise", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="simulated prefill/decode run with memory and fidelity reports")
    p.add_argument("--spec", required=True, help="SyntheticSpec as a JSON file or JSON text")
    p.add_argument("--key-stack", type=Path, required=True)
    p.add_argument("--value-stack", type=Path, required=True)
    p.add_argument("--linit", type=int, default=4)
    p.add_argument("--llocal", type=int, default=1024)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--prompt", type=int)
    p.add_argument("--checkpoints", type=int, default=4)
    p.add_argument("--queries", type=int, default=64)
    p.add_argument("--query-seed", type=int, default=0)
    p.add_argument("--block-rows", type=int, default=256)
    p.add_argument("--budget-bytes", type=int)
    p.add_argument("--eager", action="store_true", help="quantize each evicted row immediately")
    p.add_argument("--no-fidelity", action="store_true")
    p.add_argument("--save-snapshot", type=Path, help="write the final cache state (.vqks)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (VQKVError, OSError) as exc:
        print(f"vqkv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
