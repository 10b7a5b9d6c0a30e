"""Command-line entry points: synth, train, eval, ablate, infer."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .fda import dump_attention_csv
from .geometry import load_ply
from .network import PoseNet
from .training import evaluate_model, load_ckpt, run_ablation, synthesize, train_model

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "refine_iters", None) is not None:
        cfg = dataclasses.replace(cfg, refine_iters=args.refine_iters)
    if getattr(args, "out_dir", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    return cfg


def cmd_synth(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    train_manifest, test_manifest = synthesize(cfg)
    print(f"train manifest: {train_manifest}")
    print(f"test manifest: {test_manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.checkpoint is not None and not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    outputs = train_model(cfg, resume_from=args.checkpoint)
    print(f"final checkpoint: {outputs.final_checkpoint}")
    print(f"best checkpoint: {outputs.best_checkpoint}")
    print(f"log: {outputs.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    summary = evaluate_model(cfg, args.checkpoint, with_oracle=args.with_oracle)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    tables = run_ablation(cfg)
    for name, rows in tables.items():
        print(f"[{name}]")
        for row in rows:
            print("  " + json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    for path in (args.checkpoint, args.obs, args.model):
        if not Path(path).is_file():
            raise ConfigError(f"input not found: {path}")
    net = PoseNet(cfg.network)
    load_ckpt(net, args.checkpoint)
    obs = load_ply(args.obs, frame="camera")
    model = load_ply(args.model, frame="object")
    result = net.forward(obs, model)
    pose = result.pose
    if net.refiner is not None and cfg.refine_iters > 0:
        state = net.make_refine_state(result)
        pose = net.refiner.refine_loop(result.pose, state, obs.points,
                                       cfg.refine_iters)
    if result.scores is not None:
        s = result.scores.s.data
        scores_summary = {"min": float(s.min()), "mean": float(s.mean()),
                          "max": float(s.max())}
    else:
        scores_summary = {"min": None, "mean": None, "max": None}
    record = {
        "R": pose.rotation.reshape(-1).tolist(),
        "t": pose.translation.tolist(),
        "scores_summary": scores_summary,
    }
    text = json.dumps(record, indent=2, sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.dump_attention is not None and result.p2p is not None:
        dump_attention_csv(args.dump_attention, result.p2p.attention)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrpose",
        description="6D pose estimation from attention-based point correspondence",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--refine-iters", dest="refine_iters", type=int, default=None)
        p.add_argument("--out-dir", dest="out_dir", default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=checkpoint == "required",
                           default=None)

    common(sub.add_parser("synth", help="generate the synthetic dataset"))
    common(sub.add_parser("train", help="train a model"), checkpoint=True)
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval, checkpoint="required")
    p_eval.add_argument("--with-oracle", action="store_true",
                        help="also solve poses by least squares over decoded points")
    common(sub.add_parser("ablate", help="train and compare ablation variants"))
    p_infer = sub.add_parser("infer", help="predict the pose of one observation")
    common(p_infer, checkpoint="required")
    p_infer.add_argument("--obs", required=True, help="observed cloud PLY (camera frame)")
    p_infer.add_argument("--model", required=True, help="model cloud PLY (object frame)")
    p_infer.add_argument("--out", default=None, help="write the JSON record here too")
    p_infer.add_argument("--dump-attention", default=None,
                         help="write the P2P attention map as CSV")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures keep a stable exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
