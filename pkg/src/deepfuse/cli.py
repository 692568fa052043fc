"""Command-line front end: describe, analyze, gradcheck, train, eval, replay.

Every command echoes its fully resolved configuration as JSON on stdout;
`deepfuse replay <resolved.json>` re-runs a command from that echo, which
reproduces outputs bit-for-bit at a fixed seed.

Exit codes: 0 success, 1 usage error, 2 spec/validation/input failure,
3 numeric failure (gradient check above tolerance, diverged training).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import analysis, fusenet, netspec
from .data import Dataset, global_contrast_normalize, load_cifar, synthetic_dataset
from .netspec import SpecError
from .train import (
    MODES,
    TrainConfig,
    TrainDivergence,
    evaluate,
    evaluate_ensemble,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="deepfuse",
                description="Construct, train, and analyze deeply-fused networks.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_spec_opts(sp):
        sp.add_argument("--spec", required=True,
                        help="builtin pair name (e.g. N13N33) or a JSON spec file")
        sp.add_argument("--variant", choices=["c10", "c100"], default="c10",
                        help="dataset flavor; sets the class count")
        sp.add_argument("--fusion", choices=["sum", "max", "concat"], default="sum")
        sp.add_argument("--fuse-point", choices=["before_relu", "after_relu"],
                        default="before_relu")
        sp.add_argument("--width-scale", type=float, default=1.0,
                        help="channel shrink factor for fast desk-scale runs")

    sp = sub.add_parser("describe", help="layer/block/parameter tables for a spec")
    add_spec_opts(sp)

    sp = sub.add_parser("analyze", help="path metrics, groupings, receptive fields")
    add_spec_opts(sp)
    sp.add_argument("--out", help="directory for report.json")

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    add_spec_opts(sp)
    sp.add_argument("--kind", choices=["deep", "dsn_aux", "unidirectional"],
                    default="deep")
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.add_argument("--samples", type=int, default=200,
                    help="coordinates sampled per parameter kind")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--input-hw", type=int, default=8)

    def add_data_opts(sp):
        sp.add_argument("--dataset", help="directory with CIFAR binary files")
        sp.add_argument("--synthetic", action="store_true",
                        help="use the built-in synthetic blob dataset")
        sp.add_argument("--difficulty", type=float, default=1.0,
                        help="synthetic dataset noise level")
        sp.add_argument("--subset", type=int, default=0,
                        help="truncate the training split to N images (0 = all)")
        sp.add_argument("--test-subset", type=int, default=0,
                        help="truncate the test split to N images (0 = all)")

    sp = sub.add_parser("train", help="run the training harness")
    add_spec_opts(sp)
    add_data_opts(sp)
    sp.add_argument("--mode", choices=list(MODES), default="deep")
    sp.add_argument("--epochs", type=int, default=40)
    sp.add_argument("--lr0", type=float, default=0.1)
    sp.add_argument("--wd", type=float, default=5e-4)
    sp.add_argument("--batch", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--aux-weight", type=float, default=1.0)
    sp.add_argument("--no-augment", action="store_true")
    sp.add_argument("--out", required=True,
                    help="directory for metrics.csv, curves.png, checkpoint.dfn")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    add_spec_opts(sp)
    add_data_opts(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--batch", type=int, default=100)

    sp = sub.add_parser("replay", help="re-run a command from its resolved JSON echo")
    sp.add_argument("config", help="path to a resolved.json emitted by a previous run")
    return p


def _resolve_spec(args) -> netspec.FusedNetSpec:
    classes = 10 if args.variant == "c10" else 100
    if os.path.exists(args.spec):
        with open(args.spec, encoding="utf-8") as fh:
            spec = netspec.parse_spec(fh.read())
    else:
        spec = netspec.fused_spec_from_name(
            args.spec, num_classes=classes, fusion=args.fusion,
            fuse_point=args.fuse_point)
    if args.width_scale != 1.0:
        spec = netspec.scale_width(spec, args.width_scale)
    return spec


def _validated(spec) -> list[netspec.Diagnostic]:
    diags = netspec.validate(spec)
    for d in diags:
        print(str(d), file=sys.stderr)
    return [d for d in diags if d.severity == "error"]


def _echo_config(args) -> dict:
    resolved = {"command": args.command}
    for key, value in sorted(vars(args).items()):
        if key == "command":
            continue
        resolved[key] = value
    print(json.dumps({"resolved_config": resolved}))
    return resolved


def _load_data(args, classes: int):
    if args.synthetic or not args.dataset:
        n_train = args.subset or 1000
        n_test = args.test_subset or max(200, n_train // 5)
        train_ds = synthetic_dataset(seed=args.seed if hasattr(args, "seed") else 0,
                                     n=n_train, classes=classes,
                                     difficulty=args.difficulty)
        test_ds = synthetic_dataset(seed=(args.seed if hasattr(args, "seed") else 0) + 7919,
                                    n=n_test, classes=classes,
                                    difficulty=args.difficulty)
        return train_ds, test_ds
    variant = args.variant
    train_ds = load_cifar(args.dataset, variant, "train")
    test_ds = load_cifar(args.dataset, variant, "test")
    if args.subset:
        train_ds = train_ds.subset(args.subset)
    if args.test_subset:
        test_ds = test_ds.subset(args.test_subset)
    return train_ds, test_ds


def _cmd_describe(args) -> int:
    spec = _resolve_spec(args)
    if _validated(spec):
        return EXIT_VALIDATION
    _echo_config(args)
    print(analysis.describe_text(spec))
    return EXIT_OK


def _cmd_analyze(args) -> int:
    spec = _resolve_spec(args)
    if _validated(spec):
        return EXIT_VALIDATION
    _echo_config(args)
    report = analysis.analysis_report(spec)
    text = json.dumps(report, indent=2)
    print(text)
    print(analysis.describe_text(spec))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    spec = _resolve_spec(args)
    if _validated(spec):
        return EXIT_VALIDATION
    _echo_config(args)
    report = grad_check(spec, tolerance=args.tolerance, kind=args.kind,
                        seed=args.seed, samples_per_kind=args.samples,
                        input_hw=args.input_hw)
    print(json.dumps({
        "kind": args.kind,
        "max_rel_err": report.max_rel_err,
        "tolerance": report.tolerance,
        "per_kind": report.per_kind,
        "checked": report.checked,
        "skipped": report.skipped,
        "passed": report.passed,
        "worst": [asdict(c) for c in report.worst[:5]],
    }, indent=2))
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _model_arrays(model) -> tuple[dict, dict]:
    """(params+state, velocity-shaped params) dicts with ensemble prefixes."""
    nets = model if isinstance(model, list) else [model]
    params, state = {}, {}
    for k, net in enumerate(nets):
        prefix = f"net{k}." if len(nets) > 1 else ""
        for name, arr in net.params().items():
            params[prefix + name] = arr
        for name, arr in net.state().items():
            state[prefix + name] = arr
    return params, state


def _cmd_train(args) -> int:
    spec = _resolve_spec(args)
    if _validated(spec):
        return EXIT_VALIDATION
    _echo_config(args)
    classes = spec.num_classes
    train_ds, test_ds = _load_data(args, classes)
    cfg = TrainConfig(lr0=args.lr0, weight_decay=args.wd, batch=args.batch,
                      epochs=args.epochs, mode=args.mode, seed=args.seed,
                      augment=not args.no_augment, aux_weight=args.aux_weight)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.json"), "w", encoding="utf-8") as fh:
        resolved = {"command": args.command}
        resolved.update({k: v for k, v in sorted(vars(args).items()) if k != "command"})
        json.dump({"resolved_config": resolved}, fh, indent=2)
        fh.write("\n")
    try:
        model, state = train(spec, train_ds, cfg, test_dataset=test_ds)
    except TrainDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    csv_path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(csv_path, state.log)
    from .figures import render_training_curves

    fig_path = render_training_curves(
        state.log, os.path.join(args.out, "curves.png"),
        title=f"{args.spec} ({cfg.mode})")
    params, bn_state = _model_arrays(model)
    params_and_state = dict(params)
    params_and_state.update(bn_state)
    ckpt_path = os.path.join(args.out, "checkpoint.dfn")
    save_checkpoint(ckpt_path, params_and_state, state.velocity)
    last = state.log[-1]
    print(json.dumps({
        "epochs": cfg.epochs,
        "final_train_loss": last["train_loss"],
        "final_train_err": last["train_err"],
        "final_test_err": last["test_err"],
        "metrics_csv": csv_path,
        "figure": fig_path,
        "checkpoint": ckpt_path,
    }, indent=2))
    return EXIT_OK


def _cmd_eval(args) -> int:
    spec = _resolve_spec(args)
    if _validated(spec):
        return EXIT_VALIDATION
    _echo_config(args)
    stored, _velocity = load_checkpoint(args.checkpoint)
    ensemble = any(name.startswith("net0.") for name in stored)
    if ensemble:
        from dataclasses import replace as dc_replace

        nets = [fusenet.build(dc_replace(spec, members=(m,)), seed=0)
                for m in spec.members]
    else:
        nets = [fusenet.build(spec, seed=0,
                              aux_heads=any(n.startswith("aux") for n in stored))]
    for k, net in enumerate(nets):
        prefix = f"net{k}." if ensemble else ""
        own_params = net.params()
        own_state = net.state()
        for name, arr in stored.items():
            if not name.startswith(prefix):
                continue
            local = name[len(prefix):]
            if local in own_params:
                own_params[local][...] = arr.astype(own_params[local].dtype)
            elif local in own_state:
                own_state[local][...] = arr.astype(own_state[local].dtype)
    _, test_ds = _load_data(args, spec.num_classes)
    ready = Dataset(global_contrast_normalize(test_ds.images), test_ds.labels,
                    split="test")
    if ensemble:
        err, loss = evaluate_ensemble(nets, ready, args.batch)
    else:
        err, loss = evaluate(nets[0], ready, args.batch)
    print(json.dumps({"error_rate": err, "loss": loss, "n": len(ready)}, indent=2))
    return EXIT_OK


_HANDLERS = {
    "describe": _cmd_describe,
    "analyze": _cmd_analyze,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "eval": _cmd_eval,
}


def _cmd_replay(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    resolved = doc.get("resolved_config", doc)
    command = resolved.get("command")
    if command not in _HANDLERS:
        print(f"error: replay config names unknown command {command!r}", file=sys.stderr)
        return EXIT_USAGE
    ns = argparse.Namespace(**resolved)
    return _HANDLERS[command](ns)


def run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "replay":
            return _cmd_replay(args)
        return _HANDLERS[args.command](args)
    except SpecError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainDivergence as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
