"""Command-line interface.

Verbs: generate-data, train, prune, audit, mitigate, sweep, ablate-upsample.
Every verb accepts --config pointing at a JSON file; flags override config
values. Exit codes: 0 success, 1 configuration error, 2 completed with
partial failures. The FAIRPRUNE_OUTPUT_ROOT environment variable reroots
relative output directories.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import ColumnSchema, SynthSpec, load_csv, save_csv, save_manifest, synth_gaussian_groups
from .fairaudit import AuditOptions, audit
from .harness import (
    ConfigError,
    ExperimentConfig,
    emit,
    resolve_output_dir,
    run_sweep,
    run_upsample_ablation,
)
from .mitigator import MitigationOptions, fair_train
from .netcore import ModelSpec, TrainConfig, init_model, load_params, save_params, train
from .pruner import magnitude_prune, save_mask

__all__ = ["main", "entry"]


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _synth_from(cfg: dict, args) -> SynthSpec:
    section = dict(cfg.get("synth", {}))
    if args.proportions:
        section["group_proportions"] = list(_float_list(args.proportions))
    if args.separation is not None:
        section["class_separation"] = (
            list(_float_list(args.separation)) if "," in args.separation
            else float(args.separation)
        )
    if args.noise is not None:
        section["noise_scale"] = (
            list(_float_list(args.noise)) if "," in args.noise else float(args.noise)
        )
    for key, value in (("n_total", args.n_total), ("dims", args.dims),
                       ("n_classes", args.classes), ("seed", args.seed)):
        if value is not None:
            section[key] = value
    section["group_proportions"] = tuple(section.get("group_proportions", ()))
    if isinstance(section.get("class_separation"), list):
        section["class_separation"] = tuple(section["class_separation"])
    if isinstance(section.get("noise_scale"), list):
        section["noise_scale"] = tuple(section["noise_scale"])
    try:
        return SynthSpec(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic spec: {exc}") from exc


def _model_from(cfg: dict, args) -> ModelSpec:
    section = dict(cfg.get("model", {}))
    if getattr(args, "layers", None):
        section["layer_sizes"] = list(_int_list(args.layers))
    for key, attr in (("hidden_activation", "activation"), ("output", "output_kind"),
                      ("loss_kind", "loss")):
        value = getattr(args, attr, None)
        if value is not None:
            section[key] = value
    try:
        return ModelSpec.from_dict({
            "layer_sizes": tuple(section["layer_sizes"]),
            "hidden_activation": section.get("hidden_activation", "tanh"),
            "output": section.get("output", "softmax"),
            "loss_kind": section.get("loss_kind", "cross_entropy"),
            "use_bias": section.get("use_bias", True),
        })
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad model spec: {exc}") from exc


def _train_from(cfg: dict, args) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    for key, attr in (("learning_rate", "lr"), ("epochs", "epochs"),
                      ("batch_size", "batch_size"), ("momentum", "momentum"),
                      ("weight_decay", "weight_decay"), ("seed", "seed")):
        value = getattr(args, attr, None)
        if value is not None:
            section[key] = value
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _dataset_from(cfg: dict, args):
    path = getattr(args, "data", None) or cfg.get("csv_path")
    if not path:
        raise ConfigError("no dataset: pass --data or set csv_path in the config")
    schema = ColumnSchema(
        getattr(args, "group_col", None) or cfg.get("csv_group_column", "group"),
        getattr(args, "label_col", None) or cfg.get("csv_label_column", "label"),
    )
    return load_csv(path, schema)


def _cmd_generate_data(args) -> int:
    cfg = _load_config(args.config)
    spec = _synth_from(cfg, args)
    ds = synth_gaussian_groups(spec)
    out = resolve_output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out / "data.csv")
    save_manifest(ds, out / "manifest.json", provenance={
        "seed": spec.seed,
        "group_proportions": list(spec.group_proportions),
    })
    print(f"wrote {out / 'data.csv'} ({ds.n} rows, {ds.n_groups} groups, "
          f"{ds.n_classes} classes)")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    ds = _dataset_from(cfg, args)
    model = _model_from(cfg, args)
    tcfg = _train_from(cfg, args)
    params = init_model(model, tcfg.seed)
    result = train(model, params, ds, tcfg)
    save_params(result.params, args.out, model)
    print(f"wrote {args.out}; final loss {result.epoch_losses[-1]:.6g}")
    return 0


def _cmd_prune(args) -> int:
    params, model = load_params(args.params)
    mask, pruned = magnitude_prune(params, args.rate)
    save_params(pruned, args.out, model)
    if args.mask_out:
        save_mask(mask, args.mask_out)
    print(f"pruned {mask.n_pruned}/{mask.k} parameters at rate {args.rate}")
    return 0


def _cmd_audit(args) -> int:
    cfg = _load_config(args.config)
    ds = _dataset_from(cfg, args)
    orig, model = load_params(args.orig)
    pruned, _ = load_params(args.pruned)
    if model is None:
        raise ConfigError(f"{args.orig}.json sidecar carries no model spec")
    options = AuditOptions(with_hessian=not args.no_hessian)
    result = audit(model, orig, pruned, ds, options)
    payload = result.to_dict()
    payload["config"] = cfg
    Path(args.out).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    v = result.violation
    print(f"wrote {args.out}; xi_loss={v.loss_based:.6g} xi_acc={v.accuracy_based:.6g}")
    return 0


def _cmd_mitigate(args) -> int:
    cfg = _load_config(args.config)
    ds = _dataset_from(cfg, args)
    model = _model_from(cfg, args)
    tcfg = _train_from(cfg, args)
    mit = MitigationOptions(**cfg.get("mitigation", {}))
    if args.lagrangian_step is not None:
        mit = replace(mit, lagrangian_step=args.lagrangian_step)
    params = init_model(model, tcfg.seed)
    trained, state = fair_train(model, params, ds, tcfg, mit)
    save_params(trained, args.out, model)
    state.save(str(args.out) + ".mitigation.json")
    print(f"wrote {args.out}; final multipliers {np.round(state.multipliers, 6).tolist()}")
    return 0


def _cmd_sweep(args) -> int:
    payload = _load_config(args.config)
    if args.rates:
        payload["rates"] = list(_float_list(args.rates))
    if args.seeds:
        payload["seeds"] = list(_int_list(args.seeds))
    if args.regimes:
        payload["regimes"] = args.regimes.split(",")
    if args.output_dir:
        payload["output_dir"] = args.output_dir
    if args.normalization:
        payload["normalization"] = args.normalization
    cfg = ExperimentConfig.from_dict(payload)
    report = run_sweep(cfg)
    written = emit(report, cfg.output_dir)
    for path in written.values():
        print(f"wrote {path}")
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed", file=sys.stderr)
        return 2
    return 0


def _cmd_ablate(args) -> int:
    payload = _load_config(args.config)
    if args.seeds:
        payload["seeds"] = list(_int_list(args.seeds))
    cfg = ExperimentConfig.from_dict(payload)
    factors = _int_list(args.factors) if args.factors else (1, 5, 10, 20)
    report = run_upsample_ablation(cfg, args.group, factors)
    written = emit(report, cfg.output_dir)
    for path in written.values():
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairprune",
        description="Train, prune, and audit small dense classifiers for "
                    "per-group disparate impact.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic grouped dataset")
    p.add_argument("--config", help="JSON config with a 'synth' section")
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--proportions", help="comma list, e.g. 0.42,0.19,0.15,0.15,0.07")
    p.add_argument("--separation", help="scalar or comma list per group")
    p.add_argument("--noise", help="scalar or comma list per group")
    p.add_argument("--n-total", dest="n_total", type=int)
    p.add_argument("--dims", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train a classifier on a CSV dataset")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output parameter file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("prune", help="magnitude-prune a parameter file")
    p.add_argument("--params", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-out", dest="mask_out")
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("audit", help="audit original vs pruned parameters")
    _add_data_flags(p)
    p.add_argument("--orig", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--out", required=True, help="output JSON report")
    p.add_argument("--no-hessian", action="store_true",
                   help="skip Hessian eigenvalues and second-order bounds")
    p.set_defaults(func=_cmd_audit)

    p = sub.add_parser("mitigate", help="fair training with the dual penalty")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--lagrangian-step", dest="lagrangian_step", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mitigate)

    p = sub.add_parser("sweep", help="run a rate x regime x seed sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--rates", help="override: comma list")
    p.add_argument("--seeds", help="override: comma list")
    p.add_argument("--regimes", help="override: comma list")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--normalization", choices=("none", "minmax_per_sweep"))
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ablate-upsample", help="upsample one group and track "
                                               "gradient norms")
    p.add_argument("--config", required=True)
    p.add_argument("--group", type=int, required=True)
    p.add_argument("--factors", help="comma list, default 1,5,10,20")
    p.add_argument("--seeds", help="override: comma list")
    p.set_defaults(func=_cmd_ablate)
    return parser


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--data", help="CSV dataset path")
    p.add_argument("--group-col", dest="group_col")
    p.add_argument("--label-col", dest="label_col")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", help="comma list, e.g. 10,32,3")
    p.add_argument("--activation", choices=("relu", "tanh", "sigmoid"))
    p.add_argument("--output-kind", dest="output_kind",
                   choices=("softmax", "sigmoid_binary", "linear"))
    p.add_argument("--loss", choices=("cross_entropy", "binary_cross_entropy", "mse"))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
