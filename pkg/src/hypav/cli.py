"""``hypav`` command line: gen, train, eval, delta, align, sweep.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical error. Errors go to stderr as ``hypav:error:<kind>: message``.
"""

import argparse
import configparser
import csv
import io
import json
import logging
import os
import re
import sys
from dataclasses import fields

import numpy as np

from . import alignment, data, hyperbolicity, model
from .errors import ConfigError, DataError, DomainError, HypavError, NumericalDomainError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("hypav")

KERNEL_ALIASES = {"cosine": "cosine-tangent", "distance": "neg-geodesic-distance"}

GEN_DEFAULTS = {
    "num_super": 3,
    "classes_per_super": 4,
    "per_class": 50,
    "sigma": 0.1,
    "gamma": 0.2,
    "unseen_fraction": 0.5,
    "seed": 0,
}


class UsageError(HypavError):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # Let comma lists of negative numbers ("-0.1,-0.2") pass as values.
        self._negative_number_matcher = re.compile(r"^-\d*\.?\d+(?:[eE][-+]?\d+)?(?:,-?\d*\.?\d+(?:[eE][-+]?\d+)?)*$")

    def error(self, message):
        raise UsageError(message)


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _kernel(text):
    return KERNEL_ALIASES.get(text, text)


_TRAIN_DEFAULTS = model.TrainConfig()


def _add_run_flags(p):
    d = _TRAIN_DEFAULTS
    g = p.add_argument_group("run configuration (defaults shown; --config values override defaults, flags override both)")
    g.add_argument("--mode", choices=model.MODES, help=f"alignment design (default {d.mode})")
    g.add_argument("--space", choices=alignment.SPACES, help=f"alignment geometry (default {d.space})")
    g.add_argument("--kernel", type=_kernel, help=f"cosine-tangent | neg-geodesic-distance (default {d.kernel})")
    g.add_argument("--curvature", type=float, help=f"fixed curvature for hyper-alignment (default {d.curvature})")
    g.add_argument("--c0", type=float, help=f"initial curvature of adaptive heads (default {d.c0})")
    g.add_argument("--num-curvatures", type=int, help=f"N_c for hyper-multiple (default {d.num_curvatures})")
    g.add_argument("--geometries", help="per-curvature geometry for mixed runs, e.g. E+H")
    g.add_argument("--align-at", choices=model.ALIGN_AT, help=f"features to align (default {d.align_at})")
    g.add_argument("--align-weight", type=float, help=f"weight of the alignment loss (default {d.align_weight})")
    g.add_argument("--lr", type=float, help=f"SGD learning rate (default {d.lr})")
    g.add_argument("--batch-size", type=int, help=f"(default {d.batch_size})")
    g.add_argument("--epochs", type=int, help=f"(default {d.epochs})")
    g.add_argument("--tau", type=float, help=f"softmax temperature (default {d.tau})")
    g.add_argument("--xi", type=float, help=f"ball clipping margin (default {d.xi})")
    g.add_argument("--score", choices=("cosine", "neg-sqdist"), help=f"classification score (default {d.score})")
    g.add_argument("--head-init", choices=("uniform", "zeros"), help=f"curvature head init (default {d.head_init})")
    g.add_argument("--seed", type=int, help=f"(default {d.seed})")


def _read_config_file(path):
    if path is None:
        return {}
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DataError(f"cannot read config file {path}")
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[key.replace("-", "_")] = value
    return out


def _coerce(value, template):
    if value is None or value == "None":
        return None
    if isinstance(template, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value


def resolve_train_config(args):
    """Defaults <- config file <- explicit flags."""
    file_vals = _read_config_file(getattr(args, "config", None))
    kwargs = {}
    for f in fields(model.TrainConfig):
        default = getattr(_TRAIN_DEFAULTS, f.name)
        value = default
        if f.name in file_vals:
            value = _coerce(file_vals[f.name], default if default is not None else "")
            if f.name == "kernel":
                value = _kernel(value)
        flag = getattr(args, f.name, None)
        if flag is not None:
            value = flag
        kwargs[f.name] = value
    return model.TrainConfig(**kwargs), file_vals


def _write_config_echo(path, sections):
    cp = configparser.ConfigParser()
    for name, values in sections.items():
        cp[name] = {k: str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def _fmt(x):
    return "undefined" if x is None else f"{x:.2f}"


def _print_report(report):
    for key in ("S", "U", "HM", "ZSL"):
        print(f"{key} = {_fmt(getattr(report, key))}")


# -- subcommands ------------------------------------------------------------


def cmd_gen(args):
    file_vals = _read_config_file(args.config)
    cfg = {}
    for key, default in GEN_DEFAULTS.items():
        value = _coerce(file_vals[key], default) if key in file_vals else default
        flag = getattr(args, key, None)
        cfg[key] = flag if flag is not None else value
    bundle = data.default_dataset(
        seed=cfg["seed"], num_super=cfg["num_super"], classes_per_super=cfg["classes_per_super"],
        per_class=cfg["per_class"], unseen_fraction=cfg["unseen_fraction"],
        sigma=cfg["sigma"], gamma=cfg["gamma"],
    )
    bundle.save(args.out)
    _write_config_echo(os.path.join(args.out, "config.ini"), {"data": cfg})
    n_train = len(bundle.rows("train"))
    print(f"wrote {args.out}: {len(bundle.labels)} rows ({n_train} train), "
          f"{bundle.num_classes} classes ({int(bundle.seen.sum())} seen)")
    return EXIT_OK


def _checkpoint_tensors(params):
    return dict(params.tensors)


def save_run(out, params, history, cfg, bundle):
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, "checkpoint.havf")
    data.write_checkpoint(ckpt, _checkpoint_tensors(params), extra={"tau": params.tau, "c0": params.c0})
    with open(os.path.join(out, "train_log.jsonl"), "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_config_echo(os.path.join(out, "config.ini"), {"train": cfg.to_dict()})
    fw = model.embed(params, bundle, bundle.rows("test"))
    theta = os.path.join(out, "theta_v.havf")
    data.write_features(theta, fw.theta_v)
    rows = bundle.rows("test")
    data.write_sidecar(theta, {
        "labels": [int(x) for x in bundle.labels[rows]],
        "superclass_index": [int(x) for x in bundle.taxonomy.class_to_super[bundle.labels[rows]]],
        "seen": [bool(x) for x in bundle.seen[bundle.labels[rows]]],
    })


def load_params(path):
    tensors = data.read_checkpoint(path)
    meta = data.read_sidecar(path) or {}
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    return model.ModelParams(tensors, meta.get("tau", 0.1), meta.get("c0", -0.4))


def cmd_train(args):
    cfg, _ = resolve_train_config(args)
    bundle = data.DatasetBundle.load(args.data)
    result = model.train(bundle, cfg)
    save_run(args.out, result.params, result.log, cfg, bundle)
    for rec in result.log:
        print(json.dumps(rec, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    bundle = data.DatasetBundle.load(args.data)
    params = load_params(args.checkpoint)
    report = model.evaluate_gzsl(params, bundle, args.score)
    _print_report(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        _write_config_echo(os.path.join(args.out, "config.ini"), {"eval": {
            "data": args.data, "checkpoint": args.checkpoint, "score": args.score}})
    return EXIT_OK


def _write_result(args, name, result, echo):
    if not args.out:
        return
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"{name}.json"), "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    _write_config_echo(os.path.join(args.out, "config.ini"), {name: echo})


def cmd_delta(args):
    if args.features:
        x = data.read_features(args.features).data
    elif args.data and args.checkpoint:
        bundle = data.DatasetBundle.load(args.data)
        params = load_params(args.checkpoint)
        x = getattr(model.embed(params, bundle, bundle.rows("test")), args.feature)
    else:
        raise UsageError("delta needs --features, or --data with --checkpoint")
    x = np.asarray(x, dtype=np.float64)
    c = args.curvature if args.metric == "poincare" else None
    d = hyperbolicity.pairwise_distances(x, args.metric, c) if len(x) <= hyperbolicity.SUBSAMPLE_ABOVE else None
    mean, std, runs = hyperbolicity.delta_rel_stats(x, args.metric, c, seed=args.seed or 0)
    out = {"delta_rel": mean, "delta_rel_std": std, "runs": runs}
    if d is not None:
        out["delta"] = hyperbolicity.gromov_delta(d)
        out["diameter"] = float(d.max())
    print(json.dumps(out, sort_keys=True))
    _write_result(args, "delta", out, {
        "features": args.features, "data": args.data, "checkpoint": args.checkpoint,
        "feature": args.feature, "metric": args.metric, "curvature": args.curvature, "seed": args.seed or 0})
    return EXIT_OK


def cmd_align(args):
    v = data.read_features(args.video).data
    a = data.read_features(args.audio).data
    kernel = args.kernel or "neg-geodesic-distance"
    space = args.space or "hyperbolic"
    curvatures = args.curvatures or [args.curvature if args.curvature is not None else -0.2]
    if space == "euclidean":
        curvatures = [0.0] * len(curvatures)
    cfg = alignment.AlignmentConfig(
        kernel=kernel, space=space,
        curvature_mode="multi-adaptive" if len(curvatures) > 1 else "fixed",
        fixed_curvature=curvatures[0], num_curvatures=len(curvatures),
    )
    loss = alignment.multi_curvature_loss(v, a, curvatures, cfg)
    print(f"{loss:.6f}")
    _write_result(args, "align", {"loss": loss}, {
        "video": args.video, "audio": args.audio, "kernel": kernel, "space": space,
        "curvatures": ",".join(str(c) for c in curvatures)})
    return EXIT_OK


SWEEP_COLUMNS = ("method", "space", "c", "N_c", "geometry", "S", "U", "HM", "ZSL", "delta_rel")


def _sweep_row(label, cfg, bundle):
    result = model.train(bundle, cfg)
    report = model.evaluate_gzsl(result.params, bundle, cfg.score)
    drel = model.embedding_delta_rel(result.params, bundle)
    row = {"method": label, **report.to_dict(), "delta_rel": drel}
    return row


def cmd_sweep(args):
    base_cfg, _ = resolve_train_config(args)
    base_cfg.eval_every = 0
    bundle = data.DatasetBundle.load(args.data)
    rows = []

    def add(label, **overrides):
        cfg = model.TrainConfig(**{**base_cfg.to_dict(), **overrides})
        row = _sweep_row(label, cfg, bundle)
        row.update(space=cfg.space if cfg.mode != "baseline" else "-",
                   c=cfg.curvature if cfg.mode == "hyper-alignment" else "-",
                   N_c=cfg.num_curvatures if cfg.mode == "hyper-multiple" else "-",
                   geometry=cfg.geometries or "-")
        rows.append(row)
        log.info("sweep row: %s", row)

    add("baseline", mode="baseline", align_weight=0.0)
    space = base_cfg.space
    for c in args.curvatures or []:
        method = {"hyperbolic": "hyper-alignment", "spherical": "sphere-alignment",
                  "euclidean": "euclidean-alignment"}[space]
        add(method, mode="hyper-alignment", curvature=0.0 if space == "euclidean" else c, space=space)
    for n in args.num_curvatures_list or []:
        add("hyper-multiple", mode="hyper-multiple", num_curvatures=n)
    for geo in args.geometries_list or []:
        n = len(alignment.parse_geometries(geo))
        add("mixed-curvature", mode="hyper-multiple", num_curvatures=n, geometries=geo)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else ("" if v is None else v)) for k, v in row.items()})
    sys.stdout.write(buf.getvalue())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "sweep.csv"), "w") as fh:
            fh.write(buf.getvalue())
        echo = base_cfg.to_dict()
        echo.update(
            curvatures=",".join(str(c) for c in args.curvatures or []),
            num_curvatures_list=",".join(str(n) for n in args.num_curvatures_list or []),
            geometries_list=",".join(args.geometries_list or []),
        )
        _write_config_echo(os.path.join(args.out, "config.ini"), {"sweep": echo})
    return EXIT_OK


def build_parser():
    p = _Parser(prog="hypav", description="Curvature-aware cross-modal alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="synthesize a paired-modality GZSL dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-super", type=int, help="default 3")
    g.add_argument("--classes-per-super", type=int, help="default 4")
    g.add_argument("--per-class", type=int, help="default 50")
    g.add_argument("--sigma", type=float, help="latent noise (default 0.1)")
    g.add_argument("--gamma", type=float, help="modality noise (default 0.2)")
    g.add_argument("--unseen-fraction", type=float, help="default 0.5")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the two-branch model; writes checkpoint, log and config echo")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="GZSL metrics (S, U, HM, ZSL) of a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--score", choices=("cosine", "neg-sqdist"), default="cosine")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("delta", help="Gromov delta and delta_rel of a feature set")
    d.add_argument("--features")
    d.add_argument("--data")
    d.add_argument("--checkpoint")
    d.add_argument("--feature", default="theta_v", choices=("phi_v", "phi_a", "phi_v_att", "phi_a_att", "theta_v", "theta_a"))
    d.add_argument("--metric", choices=("euclidean", "poincare"), default="euclidean")
    d.add_argument("--curvature", type=float, default=-1.0)
    d.add_argument("--seed", type=int, help="subsampling seed for sets above 2048 points (default 0)")
    d.add_argument("--out")
    d.set_defaults(func=cmd_delta)

    a = sub.add_parser("align", help="alignment loss between two feature files")
    a.add_argument("--video", required=True)
    a.add_argument("--audio", required=True)
    a.add_argument("--kernel", type=_kernel, help="default neg-geodesic-distance")
    a.add_argument("--space", choices=alignment.SPACES, help="default hyperbolic")
    a.add_argument("--curvature", type=float, help="default -0.2")
    a.add_argument("--curvatures", type=_float_list, help="comma-separated list; averages the losses")
    a.add_argument("--out")
    a.set_defaults(func=cmd_align)

    s = sub.add_parser("sweep", help="ablation grid over curvature, N_c or mixed geometries")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--curvatures", type=_float_list, help="hyper-alignment curvature axis, e.g. -0.1,-0.2,-0.4")
    s.add_argument("--num-curvatures-list", type=_int_list, help="hyper-multiple N_c axis, e.g. 1,2,3")
    s.add_argument("--geometries-list", type=lambda x: x.split(","), help="mixed geometries, e.g. E+E,E+H,H+H")
    _add_run_flags(s)
    s.set_defaults(func=cmd_sweep)
    return p


def _fail(kind, message, code):
    print(f"hypav:error:{kind}: {message}", file=sys.stderr)
    return code


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand (gen, train, eval, delta, align, sweep)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (DataError, OSError, KeyError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except (NumericalDomainError, DomainError, FloatingPointError) as exc:
        return _fail("numerical", exc, EXIT_NUMERICAL)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
