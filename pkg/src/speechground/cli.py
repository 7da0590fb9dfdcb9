"""Command-line entry point: data generation, both training stages, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import SceneGenerationError, generate_corpus, save_scene
from .evaluation import EmptyCorpusError, evaluate
from .optim import OptimizerError
from .train import ConfigError, TrainConfig, TrainingDivergedError, finetune, pretrain


def _config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.load(path)


def _logger(path):
    if path is None:
        return None, None
    fh = open(path, "w", encoding="utf-8")

    def log(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")

    return log, fh


def cmd_gen_data(args) -> int:
    cfg = _config(args.config)
    cfg.corpus_seed = args.corpus_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_corpus(cfg.vocabulary(), args.count, cfg.scene, args.first_seed)
    for scene in scenes:
        save_scene(scene, out / f"scene_{scene.seed:07d}.npz")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def _train(args, stage) -> int:
    cfg = _config(args.config)
    if cfg.stage != stage:
        raise ConfigError(f"config stage is {cfg.stage!r}, expected {stage!r}")
    log, fh = _logger(args.log)
    t0 = time.time()
    try:
        if stage == "pretrain":
            ckpt = pretrain(cfg, log)
        else:
            ckpt = finetune(cfg, load_checkpoint(args.init), log)
    finally:
        if fh is not None:
            fh.close()
    save_checkpoint(ckpt, args.out)
    print(f"{stage}: {ckpt.step} steps in {time.time() - t0:.1f}s, checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .data import eval_corpus

    ckpt = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    result = evaluate(ckpt, eval_corpus(cfg.vocabulary(), args.eval_seed, args.count, cfg.scene))
    if args.json:
        print(json.dumps(result.to_dict(), sort_keys=True))
    else:
        print(f"AP {result.ap:.4f}  AP50 {result.ap50:.4f}  AP75 {result.ap75:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS

    names = [args.module] if args.module else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown module {unknown[0]!r}; choose from {', '.join(CHECKS)}")
    ok = True
    for name in names:
        worst = 0.0
        passed = True
        for seed in range(args.instances):
            report = CHECKS[name](seed)
            worst = max(worst, report.overall_error)
            passed &= report.passed
        ok &= passed
        print(f"{name:10s} {'PASS' if passed else 'FAIL'}  max rel err {worst:.2e} over {args.instances} instances")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechground", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic scene corpus")
    g.add_argument("--corpus-seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="take scene parameters from this config")
    g.add_argument("--first-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="stage 1 training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="metrics log, one JSON object per line")
    t.set_defaults(func=lambda a: _train(a, "pretrain"))

    f = sub.add_parser("finetune", help="stage 2 MoLE fine-tuning")
    f.add_argument("--config", required=True)
    f.add_argument("--init", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--log")
    f.set_defaults(func=lambda a: _train(a, "finetune"))

    e = sub.add_parser("eval", help="AP / AP50 / AP75 on held-out scenes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--eval-seed", type=int, required=True)
    e.add_argument("--count", type=int, required=True)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every backward pass")
    c.add_argument("--module")
    c.add_argument("--instances", type=int, default=20)
    c.set_defaults(func=cmd_gradcheck)
    return p


ERRORS = (
    CheckpointError,
    ConfigError,
    EmptyCorpusError,
    OptimizerError,
    SceneGenerationError,
    TrainingDivergedError,
    OSError,
    ValueError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
