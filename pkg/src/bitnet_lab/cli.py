"""Command-line entry point: ``bitnet-lab <subcommand> [options]``.

Exit codes: 0 success, 1 domain error (one ``error: ...`` line on stderr),
2 usage error. ``--csv`` / ``--json`` select machine-readable output;
``--config FILE`` supplies option defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

from . import accounting, arch, experiments, regions
from .errors import WorkbenchError

OUT_DIR_ENV = "BITNET_LAB_OUT"


class UsageError(Exception):
    pass


def _kv(text: str) -> tuple[str, int]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{key} must be an integer, got {value!r}") from None


def _kv_dict(pairs, required, what):
    got = dict(pairs)
    missing = [k for k in required if k not in got]
    extra = [k for k in got if k not in required]
    if missing or extra:
        raise UsageError(f"{what} needs exactly {' '.join(k + '=' for k in required)} (missing {missing}, unexpected {extra})")
    return got


# -- output -----------------------------------------------------------------

def _emit(args, rows, columns=None, text=None, out=None):
    out = out or sys.stdout
    if args.format == "json":
        out.write(json.dumps(rows if len(rows) != 1 or args.always_list else rows[0], default=str) + "\n")
        return
    if args.format == "csv" or text is None:
        columns = list(columns or rows[0].keys())
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
        out.write(buf.getvalue())
        return
    out.write(text + "\n")


# -- architecture selection -------------------------------------------------

def _add_arch_options(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cifar", nargs=3, type=_kv, metavar="KEY=INT", help="d=.. k=.. n=..")
    g.add_argument("--fc", nargs=3, type=_kv, metavar="KEY=INT", help="fully connected analog: d=.. k=.. n=..")
    g.add_argument("--bitnet26", action="store_true", default=None)
    g.add_argument("--bitnet34", action="store_true", default=None)
    g.add_argument("--arch-json", metavar="FILE", help="network document written by export-arch")
    p.add_argument("--kind", choices=arch.BLOCK_KINDS)
    p.add_argument("--classes", type=int)


def _select_net(args) -> arch.NetworkSpec:
    if args.bitnet26:
        return arch.build_bitnet26()
    if args.bitnet34:
        return arch.build_bitnet34()
    if args.arch_json:
        return arch.from_json(Path(args.arch_json).read_text())
    kind = args.kind or "bit"
    if args.cifar:
        p = _kv_dict(args.cifar, ("d", "k", "n"), "--cifar")
        return arch.build_cifar_net(p["d"], p["k"], p["n"], kind, args.classes or 10)
    if args.fc:
        p = _kv_dict(args.fc, ("d", "k", "n"), "--fc")
        return arch.build_fc_net(p["d"], p["k"], p["n"], kind, num_classes=args.classes or 2)
    raise UsageError("select an architecture: --cifar, --fc, --bitnet26, --bitnet34 or --arch-json")


def _summary(net, report):
    return {
        "model": net.name,
        "depth": arch.depth(net),
        "params": report.total_params,
        "params_m": float(report.params_megarounded),
        "flops": report.total_flops,
    }


# -- subcommands ------------------------------------------------------------

def cmd_count(args):
    net = _select_net(args)
    report = accounting.flop_count(net)
    if args.per_layer:
        if args.format == "json":
            sys.stdout.write(json.dumps(accounting.report_dict(report)) + "\n")
        else:
            sys.stdout.write(report.to_csv())
        return
    row = _summary(net, report)
    _emit(args, [row], text=f"{row['model']}  depth={row['depth']}  params={row['params']} "
                            f"({row['params_m']}M)  flops={row['flops'] / 1e9:.3f}e9")


def cmd_flops(args):
    net = _select_net(args)
    hw = tuple(args.input_hw) if args.input_hw else None
    report = accounting.flop_count(net, hw)
    h, w = hw or net.input_shape[:2]
    row = {"model": net.name, "input_h": h, "input_w": w, "flops": report.total_flops}
    _emit(args, [row], text=f"{row['flops']}")


def cmd_depth(args):
    net = _select_net(args)
    row = {"model": net.name, "depth": arch.depth(net)}
    _emit(args, [row], text=str(row["depth"]))


def cmd_table2(args):
    rows = accounting.table3_report() if args.imagenet else accounting.table2_report(args.task)
    args.always_list = True
    _emit(args, rows, accounting.REPORT_COLUMNS)


def cmd_bounds(args):
    if bool(args.bitnet) == bool(args.conven):
        raise UsageError("give exactly one of --bitnet or --conven")
    family = "bitnet" if args.bitnet else "conven"
    p = _kv_dict(args.bitnet or args.conven, ("D", "K", "L", "n"), f"--{family}")
    if family == "bitnet":
        form = args.form or "per_layer_product"
        value = regions.bound_bitnet(p["D"], p["K"], p["L"], p["n"], form)
    else:
        form = args.form or "simplified"
        value = regions.bound_conven(p["D"], p["K"], p["L"], p["n"], form)
    row = {"family": family, **p, "form": form, "bound": str(value)}
    _emit(args, [row], text=str(value))


REGION_COLUMNS = ("architecture", "n", "seed", "regions", "zaslavsky", "bound_conven", "bound_bitnet")


def cmd_regions(args):
    rows = []
    widths = args.widths
    depth_k = len(widths)
    for seed in range(args.seed, args.seed + args.nets):
        net = regions.random_relu_net(args.input_dim, widths, seed)
        count = regions.count_regions_exact(net, args.box)
        D = min(widths)
        row = {
            "architecture": "x".join(map(str, widths)),
            "n": args.input_dim,
            "seed": seed,
            "regions": count,
            "zaslavsky": regions.zaslavsky_regions(widths[0], args.input_dim) if depth_k == 1 else "",
            "bound_conven": regions.bound_conven(D, depth_k, 1, args.input_dim) if D >= args.input_dim else "",
            "bound_bitnet": (regions.bound_bitnet(D, depth_k, 1, args.input_dim, "per_layer_product")
                             if D >= 2**depth_k * args.input_dim else ""),
        }
        rows.append(row)
    args.always_list = True
    _emit(args, rows, REGION_COLUMNS)


def cmd_sawtooth(args):
    net = regions.build_sawtooth_1d(args.widths)
    pieces = regions.count_pieces_1d(net, args.resolution)
    expected = 1
    for m in args.widths:
        expected *= m
    row = {"widths": " ".join(map(str, args.widths)), "pieces": pieces, "product": expected}
    _emit(args, [row], text=str(pieces))


def _train_config(args, base=None):
    doc = dict(base or {})
    for key in ("epochs", "batch_size", "lr", "momentum", "weight_decay"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    doc["seed"] = args.seed
    return experiments.TrainConfig.from_dict(doc)


def _dataset_spec(args, base=None):
    spec = dict(base or {"kind": "moons", "count": 1000, "noise": 0.1})
    if args.dataset:
        spec["kind"] = args.dataset
    for key in ("count", "noise", "arms"):
        value = getattr(args, key, None)
        if value is not None:
            spec[key] = value
    spec.setdefault("seed", args.seed)
    return spec


def cmd_train(args):
    cfg = args.config_doc
    spec = _dataset_spec(args, cfg.get("dataset"))
    train_set = experiments.dataset_from_config(spec, "train")
    test_set = experiments.dataset_from_config(spec, "test")
    if args.fc is None and args.arch_json is None and "architecture" in cfg:
        a = cfg["architecture"]
        net = experiments.fc_analog(a["d"], a["k"], a["n"], a.get("kind", "bit"), train_set)
    else:
        if args.fc is None and args.arch_json is None:
            raise UsageError("train needs --fc d=.. k=.. n=.. or --arch-json")
        args.classes = args.classes or train_set.num_classes
        net = _select_net(args)
    history = experiments.train(net, train_set, _train_config(args, cfg.get("hyper")), test_set)
    text = history.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    if args.format == "json":
        sys.stdout.write(json.dumps([vars(r) for r in history.records]) + "\n")
    else:
        sys.stdout.write(text)


def _parse_config_spec(text):
    parts = text.split(",")
    if len(parts) not in (3, 4):
        raise argparse.ArgumentTypeError(f"expected d,k,n[,kind], got {text!r}")
    try:
        d, k, n = (int(v) for v in parts[:3])
    except ValueError:
        raise argparse.ArgumentTypeError(f"d,k,n must be integers in {text!r}") from None
    kind = parts[3] if len(parts) == 4 else "bit"
    if kind not in arch.BLOCK_KINDS:
        raise argparse.ArgumentTypeError(f"kind must be one of {arch.BLOCK_KINDS}")
    return {"d": d, "k": k, "n": n, "kind": kind}


def cmd_gradprobe(args):
    cfg = dict(args.config_doc)
    if args.models:
        cfg["architectures"] = args.models
    if "architectures" not in cfg:
        raise UsageError("gradprobe needs --models or a --config with architectures")
    cfg["dataset"] = _dataset_spec(args, cfg.get("dataset"))
    if args.seeds:
        cfg["seeds"] = args.seeds
    cfg.setdefault("seeds", [args.seed])
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    cfg.setdefault("epochs", 3)
    hyper = dict(cfg.get("hyper", {}))
    for key in ("batch_size", "lr", "momentum", "weight_decay"):
        if getattr(args, key) is not None:
            hyper[key] = getattr(args, key)
    cfg["hyper"] = hyper
    out_dir = args.out_dir or os.environ.get(OUT_DIR_ENV, ".")
    rows = experiments.run_experiment(cfg, out_dir, args.workers)
    args.always_list = True
    _emit(args, rows, experiments.PROBE_COLUMNS)


def cmd_ksweep(args):
    data = test = None
    hyper = None
    if args.dataset:
        spec = _dataset_spec(args)
        data = experiments.dataset_from_config(spec, "train")
        test = experiments.dataset_from_config(spec, "test")
        hyper = _train_config(args)
    rows = experiments.ksweep(args.d, args.n, args.ks, data, hyper, test)
    args.always_list = True
    _emit(args, rows, experiments.KSWEEP_COLUMNS)


def cmd_export_arch(args):
    net = _select_net(args)
    text = arch.to_json(net, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        sys.stdout.write(text + "\n")


# -- parser -----------------------------------------------------------------

def _common():
    p = argparse.ArgumentParser(add_help=False)
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", dest="format", action="store_const", const="json")
    fmt.add_argument("--csv", dest="format", action="store_const", const="csv")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", metavar="FILE", help="JSON file of option defaults")
    return p


def _training_options(p):
    p.add_argument("--dataset", choices=("moons", "spirals"))
    p.add_argument("--count", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--arms", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="bitnet-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, helptext in (
        ("count", cmd_count, "parameter and FLOP totals"),
        ("flops", cmd_flops, "FLOPs at a given input size"),
        ("depth", cmd_depth, "weighted-layer depth"),
        ("export-arch", cmd_export_arch, "write a network document as JSON"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _add_arch_options(p)
        p.set_defaults(func=func)
        if name == "count":
            p.add_argument("--per-layer", action="store_true", default=None)
        if name == "flops":
            p.add_argument("--input-hw", nargs=2, type=int, metavar=("H", "W"))
        if name == "export-arch":
            p.add_argument("--out", metavar="FILE")

    p = sub.add_parser("table2", parents=[common], help="CIFAR depth/param/FLOP table vs published")
    p.add_argument("--task", choices=sorted(accounting.TASK_CLASSES))
    p.add_argument("--imagenet", action="store_true", default=None, help="ImageNet nets instead")
    p.set_defaults(func=cmd_table2)

    p = sub.add_parser("bounds", parents=[common], help="linear-region lower bounds")
    p.add_argument("--bitnet", nargs=4, type=_kv, metavar="KEY=INT", help="D=.. K=.. L=.. n=..")
    p.add_argument("--conven", nargs=4, type=_kv, metavar="KEY=INT", help="D=.. K=.. L=.. n=..")
    p.add_argument("--form", choices=("simplified", "tight", "per_layer_product"))
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("regions", parents=[common], help="exact region counts of random ReLU nets")
    p.add_argument("--widths", nargs="+", type=int)
    p.add_argument("--input-dim", type=int)
    p.add_argument("--nets", type=int, help="number of random nets (consecutive seeds)")
    p.add_argument("--box", type=float)
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("sawtooth", parents=[common], help="pieces of the 1-D folding net")
    p.add_argument("--widths", nargs="+", type=int)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_sawtooth)

    p = sub.add_parser("train", parents=[common], help="train a network on synthetic data")
    _add_arch_options(p)
    _training_options(p)
    p.add_argument("--out", metavar="FILE", help="also write the run CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradprobe", parents=[common], help="first-layer gradient norms per epoch")
    p.add_argument("--models", nargs="+", type=_parse_config_spec, metavar="d,k,n[,kind]")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir")
    _training_options(p)
    p.set_defaults(func=cmd_gradprobe)

    p = sub.add_parser("ksweep", parents=[common], help="parameter counts (and desk-scale errors) over k")
    p.add_argument("--d", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--ks", nargs="+", type=int)
    _training_options(p)
    p.set_defaults(func=cmd_ksweep)
    return parser


DEFAULTS = {
    "seed": 0, "task": "cifar10", "form": None, "widths": None, "input_dim": 2, "nets": 1,
    "resolution": 100_000, "workers": 1, "d": 4, "n": 4, "ks": [1, 2, 3, 4, 5, 6],
}
# keys in a --config file that configure a whole experiment rather than one flag
DOCUMENT_KEYS = {"architectures", "architecture", "dataset", "hyper", "seeds", "epochs", "name", "base_width"}


def _merge_config(args, parser):
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
    args.config_doc = {k: v for k, v in doc.items() if k in DOCUMENT_KEYS}
    for key, value in doc.items():
        if key in DOCUMENT_KEYS:
            continue
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UsageError(f"unknown option {key!r} in config file")
        if getattr(args, dest) is None:
            if dest in ("cifar", "fc", "bitnet", "conven") and isinstance(value, dict):
                value = list(value.items())
            setattr(args, dest, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    if args.command == "sawtooth" and not args.widths:
        raise UsageError("sawtooth needs --widths")
    if args.command == "regions" and not args.widths:
        raise UsageError("regions needs --widths")
    args.always_list = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _merge_config(args, parser)
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except WorkbenchError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
