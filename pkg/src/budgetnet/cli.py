"""Command-line entry point: ``budgetnet {count-params,grad-check,train,eval}``."""

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path

from budgetnet import checkpoint as ckpt_io
from budgetnet import config as cfg
from budgetnet import gradcheck
from budgetnet.errors import BudgetNetError, UsageError
from budgetnet.model import REPORTED_COUNTS, count_params, discrepancy_note, our_model_config, resnet18_config


def shipped_config(name):
    """Path of a config shipped with the package (``our_model``, ``resnet18``, ``tiny``)."""
    return resources.files("budgetnet") / "configs" / f"{name}.cfg"


def resolve_config_path(arg):
    path = Path(arg)
    if path.is_file():
        return path
    shipped = shipped_config(arg)
    if shipped.is_file():
        return shipped
    raise UsageError(f"config file not found: {arg}")


def _same_architecture(a, b):
    keys = ("n_layers", "blocks", "channels", "conv_kernels", "skip_kernels", "se_enabled", "num_classes")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


def cmd_count_params(args):
    model_cfg = cfg.load(resolve_config_path(args.config)).model
    n = count_params(model_cfg)
    verdict = "within" if n < cfg.PARAM_BUDGET else "OVER"
    print(n)
    print(f"{verdict} the {cfg.PARAM_BUDGET:,} parameter budget")
    if _same_architecture(model_cfg, resnet18_config()):
        print(f"published ResNet18 total: {REPORTED_COUNTS['resnet18']:,}")
    elif _same_architecture(model_cfg, our_model_config(se_enabled=True, se_ratio=model_cfg.se_ratio)):
        print(f"published total: {REPORTED_COUNTS['our_model']:,}")
        print(f"note: {discrepancy_note(model_cfg)}")
    return 0


def cmd_grad_check(args):
    ops = args.op or None
    try:
        results = gradcheck.run(ops, trials=args.trials, seed=args.seed)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    ok = True
    for op, err in results.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{op:<14} max_rel_err={err:.3e}  {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_train(args):
    from budgetnet.train import train

    if args.resume:
        config = ckpt_io.load(args.resume).config
    else:
        if not args.config:
            raise UsageError("train needs --config or --resume")
        config = cfg.load(resolve_config_path(args.config))
    changes = {}
    if args.epochs is not None:
        if args.epochs < 1:
            raise UsageError("--epochs must be >= 1")
        changes["epochs"] = args.epochs
    for flag, key in (("subset", "subset"), ("seed", "seed"), ("output_dir", "output_dir"),
                      ("data_dir", "data_dir"), ("workers", "workers")):
        value = getattr(args, flag)
        if value is not None:
            changes[key] = value
    if args.no_wall_clock:
        changes["wall_clock"] = False
    try:
        config = cfg.replace(config, **changes)
    except cfg.ConfigError as exc:
        raise UsageError(str(exc)) from None
    print(f"parameters: {count_params(config.model)}")
    trainer = train(config, resume=args.resume)
    last = trainer.history[-1]
    print(f"epoch {last.epoch}: test_loss {last.test_loss:.4f} test_acc {last.test_acc:.4f}")
    print(f"outputs in {config.output_dir}")
    return 0


def cmd_eval(args):
    from budgetnet import data
    from budgetnet.train import evaluate, model_from_checkpoint, stats_from_checkpoint

    ck = ckpt_io.load(args.checkpoint)
    directory = args.data_dir or ck.config.resolved_data_dir()
    if directory is None:
        raise UsageError(f"no data directory: pass --data-dir or set ${cfg.DATA_DIR_ENV}")
    _, test_set = data.load_cifar10(directory)
    subset = args.subset if args.subset is not None else ck.config.subset
    if subset:
        test_set = test_set.subset(subset)
    loss, acc = evaluate(model_from_checkpoint(ck), test_set, stats_from_checkpoint(ck))
    print(f"test_loss {loss:.6f}")
    print(f"test_acc {acc:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="budgetnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="count trainable parameters of a config")
    p.add_argument("--config", required=True, help="config file, or a shipped name: our_model, resnet18, tiny")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference check of every backward pass")
    p.add_argument("--op", action="append", choices=sorted(gradcheck.CHECKS), help="repeatable; default all")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="train a model on CIFAR-10")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--subset", type=int, help="use the first N records of each split")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--data-dir", help=f"overrides the config; ${cfg.DATA_DIR_ENV} overrides both")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-wall-clock", action="store_true", help="write 0 for wall_seconds (reproducible CSV)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--subset", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"budgetnet: error: {exc}", file=sys.stderr)
        return 2
    except BudgetNetError as exc:
        print(f"budgetnet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
