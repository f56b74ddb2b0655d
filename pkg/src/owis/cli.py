"""Command-line interface.

Subcommands: gen, split, train, advance, finetune, eval, protocol, oracle.
Exit codes: 0 success, 2 validation/config error, 3 numeric failure.
The OWIS_SEED environment variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

from .errors import NumericError, ValidationError
from .harness import (
    ExperimentConfig,
    detections_to_dict,
    metrics_oracle,
    run_grid,
    run_protocol,
)
from .metrics import EvalConfig, evaluate, report_to_csv
from .model import detect_scene, load_checkpoint, save_checkpoint
from .prototypes import QueryStore
from .scene import catalog_hash, read_dataset, write_dataset
from .splits import (
    load_bundled,
    read_split,
    scene_type_matrix_from_dataset,
    split_frequency,
    split_from_dict,
    split_random,
    split_region,
    split_to_dict,
    write_split,
)
from .synth import GenConfig, generate
from .tasks import (
    ReplayConfig,
    TaskState,
    read_exemplars,
    relabel_for_eval,
    relabel_for_training,
    replay_scenes,
    select_exemplars,
    write_exemplars,
)


def _env_seed(seed):
    env = os.environ.get("OWIS_SEED")
    return int(env) if env is not None else seed


def _load_config(path, seed_override=None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig.from_dict({})
    seed = _env_seed(cfg.seed if seed_override is None else seed_override)
    if seed != cfg.seed:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg


def _sizes(text, n_classes):
    if text is None:
        base = n_classes // 3
        sizes = [base, base, n_classes - 2 * base]
    else:
        sizes = [int(s) for s in text.split(",")]
    return sizes


def cmd_gen(args):
    cfg = GenConfig(
        n_scenes=args.scenes,
        grid_size=args.grid_size,
        n_classes=args.classes,
        instances_per_scene=(args.min_instances, args.max_instances),
        color_noise=args.noise,
        longtail_exponent=args.longtail,
        wall_height=args.wall_height,
        n_scene_types=args.scene_types,
        seed=_env_seed(args.seed),
    )
    scenes, catalog = generate(cfg)
    write_dataset(scenes, catalog, args.out)
    print(f"wrote {len(scenes)} scenes and catalog.json to {args.out}")
    return 0


def cmd_split(args):
    kind = args.kind
    if kind.startswith("bundled-"):
        split = load_bundled(kind.split("-", 1)[1])
    else:
        if not args.data:
            raise ValidationError(f"--data is required for kind {kind!r}")
        scenes, catalog = read_dataset(args.data)
        sizes = _sizes(args.sizes, len(catalog))
        if kind == "freq":
            split = split_frequency(catalog, sizes)
        elif kind == "region":
            split = split_region(scene_type_matrix_from_dataset(scenes), sizes, catalog)
        elif kind == "random":
            per_task = args.per_task or len(catalog) // 3
            split = split_random(catalog, per_task, _env_seed(args.seed))
        else:
            raise ValidationError(f"unknown split kind {kind!r}")
    write_split(split, args.out)
    print(f"wrote split ({split.provenance}) with task sizes "
          f"{[len(t) for t in split.tasks]} to {args.out}")
    return 0


def _restore_estimator(cfg: ExperimentConfig, params, bank):
    est = cfg.estimator()
    est.params_ = params
    est.bank_ = bank
    est.store_ = QueryStore(capacity=cfg.ow["store_capacity"])
    est.classes_ = params.known_class_order
    est.log_ = []
    est.set_params(warm_start=True)
    return est


def cmd_train(args):
    cfg = _load_config(args.config)
    scenes, catalog = read_dataset(args.data)
    split = read_split(args.split)
    split.validate_against(catalog)
    state = TaskState(split=split, task_index=args.task)
    cat_hash = catalog_hash(catalog)

    if args.ckpt:
        params, bank, task_index, _split_dict, ckpt_hash, _ = load_checkpoint(args.ckpt)
        if ckpt_hash != cat_hash:
            raise ValidationError("checkpoint catalog hash does not match the dataset")
        if task_index != args.task:
            raise ValidationError(
                f"checkpoint is at task {task_index}, requested task {args.task}; "
                "run 'owis advance' first"
            )
        est = _restore_estimator(cfg, params, bank)
    else:
        if args.task != 1:
            raise ValidationError("training task > 1 requires --ckpt from 'owis advance'")
        est = cfg.estimator()
        est.set_params(classes=sorted(state.current_known))

    train_rel = [relabel_for_training(s, state) for s in scenes]
    train_rel = [s for s in train_rel if s.instances]
    est.fit(train_rel, epochs=cfg.epochs_for(args.task))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", est.params_, est.bank_, args.task,
                    split_to_dict(split), cat_hash)
    (out / "train_log.json").write_text(json.dumps(est.log_, sort_keys=True) + "\n")
    print(f"trained task {args.task} on {len(train_rel)} scenes -> {out / 'checkpoint.json'}")
    return 0


def cmd_advance(args):
    params, bank, task_index, split_dict, cat_hash, extra = load_checkpoint(args.ckpt)
    split = split_from_dict(split_dict)
    if args.split:
        split = read_split(args.split)
    state = TaskState(split=split, task_index=task_index)
    from .tasks import advance_task  # local import keeps CLI deps obvious

    params, state = advance_task(params, state)
    bank.add_classes(sorted(state.current_known))
    save_checkpoint(args.out, params, bank, state.task_index, split_to_dict(split),
                    cat_hash, extra)
    print(f"advanced to task {state.task_index} "
          f"({len(params.known_class_order)} known classes) -> {args.out}")
    return 0


def cmd_finetune(args):
    cfg = _load_config(args.config)
    scenes, catalog = read_dataset(args.data)
    params, bank, task_index, split_dict, ckpt_hash, _ = load_checkpoint(args.ckpt)
    if ckpt_hash != catalog_hash(catalog):
        raise ValidationError("checkpoint catalog hash does not match the dataset")
    split = split_from_dict(split_dict)
    if task_index < 2:
        raise ValidationError("finetune requires a checkpoint at task 2 or later")

    if args.exemplars and Path(args.exemplars).exists():
        exemplars = read_exemplars(args.exemplars)
    else:
        state0 = TaskState(split=split, task_index=task_index)
        exemplars = select_exemplars(
            scenes, state0,
            ReplayConfig(exemplars_per_class=cfg.replay["exemplars_per_class"], seed=cfg.seed),
        )
        if args.exemplars:
            write_exemplars(TaskState(split=split, task_index=task_index,
                                      exemplars=exemplars), args.exemplars)
    state = TaskState(split=split, task_index=task_index, exemplars=exemplars)

    est = _restore_estimator(cfg, params, bank)
    ft = [relabel_for_training(s, state, replay=True) for s in replay_scenes(scenes, state)]
    ft = [s for s in ft if s.instances]
    epochs = max(1, math.ceil(cfg.train["finetune_fraction"] * cfg.epochs_for(task_index)))
    est.fit(ft, epochs=epochs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.json", est.params_, est.bank_, task_index,
                    split_to_dict(split), ckpt_hash)
    print(f"fine-tuned task {task_index} on {len(ft)} replay scenes -> {out / 'checkpoint.json'}")
    return 0


def cmd_eval(args):
    scenes, catalog = read_dataset(args.data)
    params, bank, task_index, split_dict, ckpt_hash, _ = load_checkpoint(args.ckpt)
    if ckpt_hash != catalog_hash(catalog):
        raise ValidationError("checkpoint catalog hash does not match the dataset")
    if args.task != task_index:
        raise ValidationError(f"checkpoint is at task {task_index}, requested {args.task}")
    split = split_from_dict(split_dict)
    state = TaskState(split=split, task_index=task_index)
    gt = [relabel_for_eval(s, state) for s in scenes]
    use_pc = not args.no_pc
    detections = [
        detect_scene(params, s, bank=bank, use_pc=use_pc) for s in gt
    ]
    report = evaluate(
        detections, gt,
        prev_classes=state.previously_known, curr_classes=state.current_known,
        cfg=EvalConfig(), task_index=task_index,
        extra={"pc": use_pc, "ct": not args.no_ct},
    )
    report.write(args.report)
    if args.dump_preds:
        payload = detections_to_dict([s.id for s in gt], detections)
        Path(args.dump_preds).write_text(json.dumps(payload, sort_keys=True) + "\n")
    print(report_to_csv([report]), end="")
    return 0


def cmd_protocol(args):
    cfg = _load_config(args.config)
    if args.grid:
        run_grid(cfg, args.out)
        print(f"ablation grid complete -> {args.out}")
    else:
        reports, _ = run_protocol(cfg, args.out)
        print(report_to_csv(reports), end="")
    return 0


def cmd_oracle(args):
    split = read_split(args.split)
    report = metrics_oracle(args.pred, args.data, split, args.task)
    report.write(args.report)
    print(report_to_csv([report]), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="owis", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic labeled dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--classes", type=int, default=12)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--grid-size", type=int, default=32)
    g.add_argument("--min-instances", type=int, default=3)
    g.add_argument("--max-instances", type=int, default=8)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--longtail", type=float, default=1.0)
    g.add_argument("--wall-height", type=int, default=3)
    g.add_argument("--scene-types", type=int, default=4)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="produce a task split file")
    s.add_argument("--kind", required=True,
                   choices=["freq", "region", "random", "bundled-A", "bundled-B", "bundled-C"])
    s.add_argument("--data", help="dataset dir (required for freq/region/random)")
    s.add_argument("--sizes", help="comma-separated task sizes, e.g. 4,4,4")
    s.add_argument("--per-task", type=int, help="classes per task for kind=random")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one task phase")
    t.add_argument("--split", required=True)
    t.add_argument("--task", type=int, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--ckpt", help="checkpoint to warm-start from (tasks > 1)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("advance", help="widen a checkpoint for the next task")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--split", help="override the checkpoint's split file")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_advance)

    f = sub.add_parser("finetune", help="exemplar-replay fine-tuning")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--exemplars", help="exemplar JSON (read if present, else written)")
    f.add_argument("--config", help="experiment config JSON")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", type=int, required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--no-pc", action="store_true", help="disable probability correction")
    e.add_argument("--no-ct", action="store_true",
                   help="tag the report as the no-CT ablation (training-time switch)")
    e.add_argument("--dump-preds", help="also write a predictions JSON for the oracle")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("protocol", help="full three-task protocol")
    pr.add_argument("--config", help="experiment config JSON")
    pr.add_argument("--out", required=True)
    pr.add_argument("--grid", action="store_true", help="run the 2x2x2 ablation grid")
    pr.set_defaults(func=cmd_protocol)

    o = sub.add_parser("oracle", help="exhaustive metrics oracle on a predictions file")
    o.add_argument("--pred", required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--split", required=True)
    o.add_argument("--task", type=int, required=True)
    o.add_argument("--report", required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
