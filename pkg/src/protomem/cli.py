"""Command-line surface for scripted experiments.

Exit codes: 0 success, 1 validation violations, 2 config errors,
3 data errors, 4 numeric failure. Every command is deterministic given
the same config and seed; reruns produce byte-identical artifacts.
"""

import argparse
import sys

import numpy as np

from . import data as dio
from .backbone import init_model, load_params, save_params
from .config import DEFAULTS, RunConfig, load_config, parse_kv_file
from .errors import (
    ConfigError,
    ConflictingFlagsError,
    CorruptHeaderError,
    FormatVersionMismatchError,
    InsufficientClassesError,
    InsufficientSamplesError,
    NumericFailureError,
    ProtomemError,
    SizeNotMultipleOfRecordError,
    TruncatedPayloadError,
)
from .harness import (
    TrainRecipe,
    ablation_matrix,
    extract_features,
    make_blob_dataset,
    run_protocol,
    validate_stream,
)
from .losses import PretrainLossConfig
from .memory import ExplicitMemory, QuantSpec, classify, load_em, precision_sweep, save_em
from .offline import MetaConfig, init_fcc, metalearn, pretrain
from .online import ActivationMemory, FinetuneConfig, learn_class, load_actmem, save_actmem

_DATA_ERRORS = (
    OSError,
    CorruptHeaderError,
    TruncatedPayloadError,
    SizeNotMultipleOfRecordError,
    FormatVersionMismatchError,
    InsufficientClassesError,
    InsufficientSamplesError,
)

COMMANDS = (
    "pretrain",
    "metalearn",
    "protocol",
    "sweep",
    "ablate",
    "validate",
    "learn-class",
    "classify",
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _quant(cfg: RunConfig) -> QuantSpec:
    return QuantSpec(
        feature_bits=cfg.feature_bits,
        accum_bits=cfg.accum_bits,
        prototype_bits=cfg.prototype_bits,
        right_shift=max(cfg.right_shift, 0),
        max_shots=cfg.max_shots,
    )


def _load_dataset_file(path, fmt: str) -> dio.LabeledDataset:
    if fmt == "auto":
        fmt = "csv" if str(path).endswith(".csv") else "raw-binary"
    if fmt == "cifar":
        return dio.load_cifar_batch(path)
    return dio.load_dataset(path, fmt)


def _resolve_dataset(cfg: RunConfig) -> dio.LabeledDataset:
    if cfg.dataset:
        return _load_dataset_file(cfg.dataset, cfg.dataset_format)
    if cfg.synthetic:
        per_class = cfg.per_class_cap + cfg.test_per_class
        return make_blob_dataset(
            cfg.classes, per_class, grid=cfg.grid, seed=cfg.seed, noise=cfg.data_noise
        )
    raise ConfigError("no data source: set dataset=, stream_manifest=, or synthetic=true")


def _parse_manifest(path) -> dio.SessionStream:
    pairs = parse_kv_file(path)
    for key in ("base", "test", "ways", "shots"):
        if key not in pairs:
            raise ConfigError(f"{path}: manifest is missing {key!r}")
    session_keys = []
    for key in pairs:
        if key.startswith("session"):
            suffix = key[len("session") :]
            if not suffix.isdigit():
                raise ConfigError(f"{path}: bad session key {key!r}")
            session_keys.append((int(suffix), key))
        elif key not in ("base", "test", "ways", "shots"):
            raise ConfigError(f"{path}: unknown manifest key {key!r}")
    try:
        ways = int(pairs["ways"])
        shots = int(pairs["shots"])
    except ValueError as exc:
        raise ConfigError(f"{path}: ways/shots must be integers") from exc
    base = _load_dataset_file(pairs["base"], "auto")
    test = _load_dataset_file(pairs["test"], "auto")
    sessions = [
        _load_dataset_file(pairs[key], "auto") for _, key in sorted(session_keys)
    ]
    return dio.SessionStream(base, sessions, ways, shots, test)


def _resolve_stream(cfg: RunConfig) -> dio.SessionStream:
    if cfg.stream_manifest:
        return _parse_manifest(cfg.stream_manifest)
    dataset = _resolve_dataset(cfg)
    return dio.split_fscil(
        dataset,
        base_classes=cfg.base_classes,
        ways=cfg.ways,
        shots=cfg.shots,
        per_class_cap=cfg.per_class_cap,
        test_per_class=cfg.test_per_class,
        seed=cfg.seed,
        sessions=None if cfg.sessions < 0 else cfg.sessions,
    )


def _grid_for(cfg: RunConfig, input_dim: int):
    """Explicit cutmix grid when the configured one tiles the input."""
    g = cfg.grid
    if g > 0 and input_dim % (g * g) == 0:
        return (g, g)
    return None


def _recipe(cfg: RunConfig, input_dim: int) -> TrainRecipe:
    return TrainRecipe(
        hidden=tuple(cfg.hidden),
        d_p=cfg.d_p,
        pretrain_epochs=cfg.pretrain_epochs,
        pretrain_lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size,
        lambda_ortho=cfg.lambda_ortho,
        mix_probability=cfg.mix_probability,
        mix_alpha=cfg.mix_alpha,
        margin=cfg.margin,
        meta_samples=cfg.meta_samples,
        meta_iterations=cfg.meta_iterations,
        meta_lr=cfg.meta_lr,
        query_batch=cfg.query_batch,
        finetune_epochs=cfg.finetune_epochs,
        finetune_sub_batch=cfg.finetune_sub_batch,
        finetune_lr=cfg.finetune_lr,
        seed=cfg.seed,
        grid=_grid_for(cfg, input_dim),
    )


def cmd_pretrain(cfg: RunConfig) -> int:
    stream = _resolve_stream(cfg)
    base = stream.base
    dims = [base.input_dim, *cfg.hidden, cfg.d_p]
    params = init_model(dims, split_point=len(dims) - 2, seed=cfg.seed)
    fcc = init_fcc(len(base.class_ids()), cfg.d_p, cfg.seed + 1)
    loss_cfg = PretrainLossConfig(
        lambda_ortho=cfg.lambda_ortho,
        mix_probability=cfg.mix_probability,
        mix_alpha=cfg.mix_alpha,
        margin=cfg.margin,
    )
    _, _, history = pretrain(
        params,
        fcc,
        base,
        loss_cfg,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        grid=_grid_for(cfg, base.input_dim),
    )
    save_params(params, cfg.params_out)
    _write_csv(cfg.history_out, ("epoch", "ce", "ortho", "accuracy"), history)
    print(f"pretrained {cfg.pretrain_epochs} epochs -> {cfg.params_out}")
    return 0


def cmd_metalearn(cfg: RunConfig) -> int:
    params = load_params(cfg.params_in)
    stream = _resolve_stream(cfg)
    meta = MetaConfig(
        meta_samples=cfg.meta_samples,
        iterations=cfg.meta_iterations,
        lr=cfg.meta_lr,
        margin=cfg.margin,
        query_batch=cfg.query_batch,
        objective=cfg.meta_objective,
        prototype_gradient=cfg.prototype_gradient,
    )
    _, history = metalearn(params, stream.base, meta, seed=cfg.seed)
    save_params(params, cfg.params_out)
    _write_csv(cfg.history_out, ("iteration", "loss", "accuracy"), history)
    print(f"metalearned {cfg.meta_iterations} iterations -> {cfg.params_out}")
    return 0


def _report_rows(label, report):
    row = [label] + [a for a in report.session_accuracies] + [report.average]
    return row


def _write_report(path, reports):
    n_sessions = len(reports[0][1].session_accuracies)
    header = ["config"] + [f"session_{t}" for t in range(n_sessions)] + ["avg"]
    _write_csv(path, header, [_report_rows(lbl, rep) for lbl, rep in reports])


def cmd_protocol(cfg: RunConfig) -> int:
    params = load_params(cfg.params_in)
    stream = _resolve_stream(cfg)
    ft_cfg = FinetuneConfig(
        epochs=cfg.finetune_epochs, sub_batch=cfg.finetune_sub_batch, lr=cfg.finetune_lr
    )
    report = run_protocol(params, stream, _quant(cfg), finetune=cfg.finetune, ft_cfg=ft_cfg)
    label = f"pb{cfg.prototype_bits}" + ("+FT" if cfg.finetune else "")
    _write_report(cfg.report_out, [(label, report)])
    print(f"protocol avg accuracy {report.average:.4f} -> {cfg.report_out}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    params = load_params(cfg.params_in)
    stream = _resolve_stream(cfg)
    quant = _quant(cfg)
    em = ExplicitMemory(params.d_p, quant)
    act_mem = ActivationMemory(params.d_a)
    for ds in [stream.base, *stream.sessions]:
        for cid in ds.class_ids():
            rows = ds.indices_of(cid)
            learn_class(em, act_mem, params, ds.inputs[rows], cid)
    feats = extract_features(params, stream.test)
    points = precision_sweep(em, feats, stream.test.labels, cfg.sweep_bits)
    rows = [(p.bits, p.memory_bytes / 1000.0, p.accuracy) for p in points]
    _write_csv(cfg.sweep_out, ("bits", "kilobytes", "accuracy"), rows)
    print(f"swept {len(rows)} bit widths -> {cfg.sweep_out}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    stream = _resolve_stream(cfg)
    rows = []
    for token in cfg.ablate_rows.split(";"):
        token = token.strip()
        if not token or token.lower() == "none":
            rows.append(frozenset())
        else:
            rows.append(frozenset(f.strip().upper() for f in token.split(",")))
    reports = ablation_matrix(stream, rows, _recipe(cfg, stream.base.input_dim))
    _write_report(cfg.ablation_out, reports)
    print(f"ablated {len(reports)} rows -> {cfg.ablation_out}")
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    stream = _resolve_stream(cfg)
    violations = validate_stream(stream)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return 1
    print("stream ok")
    return 0


def cmd_learn_class(cfg: RunConfig) -> int:
    params = load_params(cfg.params_in)
    dataset = _resolve_dataset(cfg)
    if cfg.class_id < 0:
        raise ConfigError("learn-class requires class_id=<nonnegative id>")
    rows = dataset.indices_of(cfg.class_id)
    em = load_em(cfg.em_in) if cfg.em_in else ExplicitMemory(params.d_p, _quant(cfg))
    act_mem = load_actmem(cfg.actmem_in) if cfg.actmem_in else ActivationMemory(params.d_a)
    learn_class(em, act_mem, params, dataset.inputs[rows], cfg.class_id)
    save_em(em, cfg.em_out)
    save_actmem(act_mem, cfg.actmem_out)
    print(f"learned class {cfg.class_id} from {len(rows)} shots -> {cfg.em_out}")
    return 0


def cmd_classify(cfg: RunConfig) -> int:
    params = load_params(cfg.params_in)
    em = load_em(cfg.em_in)
    dataset = _resolve_dataset(cfg)
    feats = extract_features(params, dataset)
    rows = []
    for i, (row, lab) in enumerate(zip(feats, dataset.labels)):
        pred, scores = classify(em, row)
        rows.append((i, int(lab), pred, float(scores.max())))
    _write_csv(cfg.predictions_out, ("index", "label", "predicted", "score"), rows)
    hits = sum(1 for r in rows if r[1] == r[2])
    print(f"classified {len(rows)} samples, accuracy {hits / len(rows):.4f}")
    return 0


_HANDLERS = {
    "pretrain": cmd_pretrain,
    "metalearn": cmd_metalearn,
    "protocol": cmd_protocol,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "validate": cmd_validate,
    "learn-class": cmd_learn_class,
    "classify": cmd_classify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomem",
        description="Few-shot class-incremental learning with a prototype memory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", default=None, help="key=value config file")
        p.add_argument(
            "overrides",
            nargs="*",
            metavar="key=value",
            help=f"override any config key ({', '.join(sorted(DEFAULTS))})",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        return _HANDLERS[args.command](cfg)
    except (ConfigError, ConflictingFlagsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ProtomemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
