"""Command line entry point: ``stma {run,eval,verify,bench,simulate-memory,generate}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import load_config
from .exceptions import ContractError


def _cmd_run(args) -> int:
    from .estimator import VideoObjectSegmenter
    from .io import load_frame, load_mask, load_stml_weights, read_manifest, save_mask
    from .idassoc import ModelWeights
    from .metrics import EvalRecord

    cfg = load_config(args.config)
    rows = read_manifest(args.sequence)
    if not rows or rows[0][1] is None:
        raise ContractError("the first manifest line must name a mask")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    frame0, size = load_frame(rows[0][0], cfg.patch_size)
    weights = ModelWeights.create(
        frame0.height, frame0.width, cfg.channel_dim, cfg.heads, cfg.n_blocks, cfg.value_dim,
        cfg.quarter_dim, cfg.eighth_dim, cfg.patch_size, rng=cfg.seed,
    )
    if args.weights:
        blocks = tuple(load_stml_weights(args.weights))
        weights = type(weights)(weights.embed, weights.stem, blocks, weights.object_projection,
                                weights.encoder, weights.decoder)
    seg = VideoObjectSegmenter.from_config(cfg, weights=weights)
    mask0 = load_mask(rows[0][1], cfg.patch_size)
    seg.fit(frame0, mask0)
    n = seg.n_targets_

    with open(out / "metrics.jsonl", "w") as log:
        save_mask(out / f"{rows[0][0].stem}.png", mask0[: size[0], : size[1]])
        for k, (frame_path, mask_path) in enumerate(rows[1:], start=1):
            frame, size = load_frame(frame_path, cfg.patch_size)
            pred = seg.predict(frame)[0]
            save_mask(out / f"{frame_path.stem}.png", pred[: size[0], : size[1]])
            entry = {
                "frame": k,
                "file": frame_path.name,
                "spatial": seg.spatial_.indices(),
                "temporal": seg.temporal_.indices(),
            }
            if mask_path is not None:
                gt = load_mask(mask_path, cfg.patch_size)[: size[0], : size[1]]
                rec = EvalRecord().add(k, pred[: size[0], : size[1]], gt, n)
                entry.update(J=rec.mean_J, F=rec.mean_F, JF=rec.JF)
            log.write(json.dumps(entry) + "\n")
    print(f"wrote {len(rows)} masks to {out}")
    return 0


def _cmd_eval(args) -> int:
    from .io import load_mask
    from .metrics import EvalRecord

    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    gts = sorted(p for p in gt_dir.iterdir() if p.suffix.lower() in (".png", ".pgm", ".bmp"))
    if not gts:
        raise ContractError(f"no mask files in {gt_dir}")
    masks = [(p.name, load_mask(p, 1)) for p in gts]
    n = max(int(m.max()) for _, m in masks)
    rec = EvalRecord()
    print("frame\ttarget\tJ\tF")
    for k, (name, gt) in enumerate(masks):
        if args.skip_first and k == 0:
            continue
        pred_path = pred_dir / name
        if not pred_path.exists():
            raise ContractError(f"missing prediction {pred_path}")
        pred = load_mask(pred_path, 1)
        rec.add(name, pred, gt, n, args.tolerance)
        for j in range(1, n + 1):
            print(f"{name}\t{j}\t{rec.J[name, j]:.6f}\t{rec.F[name, j]:.6f}")
    print(f"mean\t-\t{rec.mean_J:.6f}\t{rec.mean_F:.6f}")
    print(f"J&F\t-\t{rec.JF:.6f}\t-")
    return 0


def _cmd_verify(args) -> int:
    from .verify import verify_all

    report = verify_all(fault=args.inject_fault, only=args.only or None)
    print(report)
    return 0 if report.passed else 1


def _cmd_bench(args) -> int:
    from .embedding import FeatureMap
    from .idassoc import ModelWeights, segment_frame
    from .memory import SpatialMemory, TemporalMemory
    from .idassoc import initialize_memories, PipelineOptions
    from .stml import ObjectFeatures, StmlState, stml_forward
    from .synthetic import generate_sequence
    from .tensor import Tensor

    cfg = load_config(args.config)
    rng = np.random.default_rng(cfg.seed)
    weights = ModelWeights.create(64, 64, cfg.channel_dim, cfg.heads, cfg.n_blocks, cfg.value_dim, rng=cfg.seed)
    N, C = 16, cfg.channel_dim
    fm = lambda: FeatureMap(Tensor(rng.normal(size=(N, C))), 4, 4)  # noqa: E731
    state = StmlState(fm(), [fm() for _ in range(cfg.spatial_capacity)], ObjectFeatures(Tensor(rng.normal(size=(2, C)))))
    start = time.perf_counter()
    for _ in range(args.repeats):
        stml_forward(state, weights.blocks, cfg.mode)
    t_stml = time.perf_counter() - start

    seq = generate_sequence(cfg.seed, args.frames, 2)
    opts = PipelineOptions(cfg.mode, cfg.update_objects, cfg.similarity)
    spatial, temporal = SpatialMemory(cfg.spatial_capacity, cfg.insertion_stride), TemporalMemory(cfg.temporal_capacity)
    initialize_memories(seq.frames[0], seq.masks[0], weights, spatial, temporal, opts)
    start = time.perf_counter()
    for k in range(1, args.frames):
        segment_frame(seq.frames[k], k, spatial, temporal, weights, opts)
    t_seg = time.perf_counter() - start

    print("op\tcalls\tseconds\ttokens_per_sec")
    print(f"stml_forward\t{args.repeats}\t{t_stml:.4f}\t{N * args.repeats / t_stml:.1f}")
    print(f"segment_frame\t{args.frames - 1}\t{t_seg:.4f}\t{N * (args.frames - 1) / t_seg:.1f}")
    return 0


def simulate_memory(lines, capacity: int, pin_first: bool = False) -> list[str]:
    """Replay an ``insert <idx>`` / ``touch <idx> <amount>`` trace on a temporal bank."""
    from .memory import TemporalMemory
    from .tensor import Tensor

    mem = TemporalMemory(capacity)
    key, values = Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1, 1)))
    out = []
    for lineno, raw in enumerate(lines, 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        op = parts[0]
        try:
            if op == "insert" and len(parts) == 2:
                idx = int(parts[1])
                victim = mem.insert(key, values, idx, pin=pin_first and not len(mem))
                if victim is not None:
                    out.append(f"evict\t{idx}\t{victim.frame_idx}\t{victim.usage!r}")
            elif op == "touch" and len(parts) == 3:
                mem.touch_entry(int(parts[1]), float(parts[2]))
            else:
                raise ContractError(f"cannot parse {raw.strip()!r}")
        except (ValueError, ContractError) as exc:
            raise ContractError(f"trace line {lineno}: {exc}") from None
    for e in mem.entries:
        out.append(f"entry\t{e.frame_idx}\t{e.usage!r}")
    return out


def _cmd_simulate(args) -> int:
    capacity = args.capacity
    if capacity is None:
        capacity = load_config(args.config).temporal_capacity
    with open(args.trace) as fh:
        for line in simulate_memory(fh, capacity, args.pin_first):
            print(line)
    return 0


def _cmd_generate(args) -> int:
    from .io import save_frame, save_mask, write_manifest
    from .synthetic import generate_sequence

    seq = generate_sequence(args.seed, args.length, args.targets, args.height, args.width)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for k, (frame, mask) in enumerate(zip(seq.frames, seq.masks)):
        fp, mp = out / "frames" / f"{k:05d}.png", out / "masks" / f"{k:05d}.png"
        save_frame(fp, frame)
        save_mask(mp, mask.ids)
        rows.append((fp, mp))
    write_manifest(out / "sequence.txt", rows)
    print(f"wrote {args.length} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stma", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="segment a sequence listed in a manifest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--sequence", required=True, help="manifest: 'frame [mask]' per line")
    p.add_argument("--out", required=True, help="output directory for masks and metrics.jsonl")
    p.add_argument("--weights", help="directory with saved attention block weights")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tolerance", type=float, default=None, help="boundary tolerance in pixels")
    p.add_argument("--skip-first", action="store_true", help="exclude the annotated first frame")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify", help="run the oracle and property checks")
    p.add_argument("--inject-fault", choices=["mask"], default=None, help="negative control")
    p.add_argument("--only", nargs="*", help="restrict to these check names")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("bench", help="throughput at the desk configuration")
    p.add_argument("--config")
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--frames", type=int, default=20)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("simulate-memory", help="replay an LFU trace on the temporal memory")
    p.add_argument("trace")
    p.add_argument("--capacity", type=int, default=None)
    p.add_argument("--config")
    p.add_argument("--pin-first", action="store_true", help="pin the first inserted entry")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("generate", help="write a synthetic moving-shapes sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--targets", type=int, default=2)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=_cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
