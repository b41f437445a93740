"""Command-line front end: gen-data, train, embed, pca, evaluate.

The subcommands compose the full pipeline: synthesize a clustered
dataset, train an embedding model on it, extract embeddings with a
checkpoint, reduce their dimension with PCA, and score retrieval
quality. Every invocation that writes files also writes a flat
key=value manifest next to them recording the resolved options, so a
run can be repeated exactly from its manifest.

Exit codes are uniform across subcommands: 0 on success, 2 when the
command line is wrong (unknown flags, bad values, flag values that do
not fit the referenced files), 1 when the run itself fails (missing or
corrupt files, degenerate data, non-finite training).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import __version__
from .errors import DegenerateInputError, Error, InvalidArgumentError

# numpy honors these caps only if they are set before its first import,
# so handlers import the numeric modules lazily after main() has
# exported the --threads value.
_THREAD_ENV = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

# mirrors loss.NORMALIZATIONS, which cannot be imported at parser-build
# time for the reason above
_NORM_MODES = ("sum", "mean_valid", "mean_active")

# fixed rather than a flag: identical flags must always produce
# identical output bytes, and BLAS results can drift with batch shape
_EMBED_CHUNK = 256


# ---------------------------------------------------------------------------
# flag value parsers (argparse types, so bad values exit 2 with usage)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _dim_list(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not dims or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"expected positive widths, got {text!r}")
    return dims


def _map_shape(text: str) -> tuple[int, int, int]:
    dims = _dim_list(text)
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected H,W,C with three entries, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# manifests


def _fmt_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def _ensure_parent(out_prefix: str) -> None:
    # --out is a path prefix; create its directory so runs/base works cold.
    parent = os.path.dirname(out_prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write_manifest(path: str, entries) -> None:
    from .dataio import _atomic_write

    text = "".join(f"{key}={_fmt_value(value)}\n" for key, value in entries)
    _atomic_write(path, text.encode("utf-8"))


def _write_text(path: str, text: str) -> None:
    from .dataio import _atomic_write

    _atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# shared input handling


def _load_dataset(path: str, map_shape, split: str):
    """Read a TDML file as a dataset, reshaping rows to maps if asked."""
    import numpy as np

    from . import dataio

    triples = dataio.read_embeddings(path)
    if not triples:
        raise DegenerateInputError(f"{path} contains no records")
    records = []
    for rec_id, label, vec in triples:
        payload = vec
        if map_shape is not None:
            h, w, c = map_shape
            if vec.shape[0] != h * w * c:
                raise InvalidArgumentError(
                    f"--map-shape {h},{w},{c} needs {h * w * c} values per record, "
                    f"{path} has {vec.shape[0]}"
                )
            payload = np.ascontiguousarray(vec.reshape(h, w, c))
        records.append(dataio.Record(id=rec_id, label=label, payload=payload))
    return dataio.Dataset(records, split=split)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    from . import dataio

    train_set, test_set = dataio.generate_clusters(
        num_classes=args.classes,
        per_class=args.per_class,
        dim=args.dim,
        separation=args.separation,
        spread=args.spread,
        seed=args.seed,
        split_fraction=args.split,
    )
    _ensure_parent(args.out)
    train_path = args.out + ".train.tdml"
    test_path = args.out + ".test.tdml"
    dataio.write_embeddings(train_path, train_set.triples())
    dataio.write_embeddings(test_path, test_set.triples())
    _write_manifest(
        args.out + ".manifest",
        [
            ("tool_version", __version__),
            ("subcommand", "gen-data"),
            ("classes", args.classes),
            ("per_class", args.per_class),
            ("dim", args.dim),
            ("separation", args.separation),
            ("spread", args.spread),
            ("seed", args.seed),
            ("split", args.split),
            ("threads", args.threads),
            ("out", args.out),
            ("train_file", train_path),
            ("test_file", test_path),
        ],
    )
    print(
        f"wrote {train_path} ({len(train_set)} records) "
        f"and {test_path} ({len(test_set)} records)"
    )
    return 0


def _cmd_train(args) -> int:
    from . import dataio
    from .model import ModelConfig
    from .trainer import TrainConfig, train

    if args.conv_channels is not None and args.map_shape is None:
        raise InvalidArgumentError("--conv-channels requires --map-shape")
    if args.dense is None and args.init_from is None:
        raise InvalidArgumentError("either --dense or --init-from is required")

    initial_params = None
    if args.init_from is not None:
        model_config, initial_params, _ = dataio.load_checkpoint(args.init_from)
        # model flags stay optional on a warm start but must not disagree
        if args.dense is not None and args.dense != model_config.dense_dims:
            raise InvalidArgumentError("--dense disagrees with the --init-from checkpoint")
        if args.fc_reduction is not None and args.fc_reduction != model_config.fc_reduction:
            raise InvalidArgumentError(
                "--fc-reduction disagrees with the --init-from checkpoint"
            )
        if args.conv_channels is not None and args.conv_channels != model_config.conv_channels:
            raise InvalidArgumentError(
                "--conv-channels disagrees with the --init-from checkpoint"
            )
        if (args.map_shape is not None) != (model_config.input_kind == "map"):
            raise InvalidArgumentError(
                "--map-shape must be given exactly when the --init-from checkpoint "
                "takes map input"
            )
        if model_config.input_kind == "map" and args.map_shape[2] != model_config.in_channels:
            raise InvalidArgumentError(
                f"--map-shape channel count {args.map_shape[2]} != checkpoint "
                f"in_channels {model_config.in_channels}"
            )

    dataset = _load_dataset(args.data, args.map_shape, split="train")

    if args.init_from is None:
        if args.map_shape is not None:
            model_config = ModelConfig(
                "map",
                in_channels=args.map_shape[2],
                conv_channels=args.conv_channels,
                dense_dims=args.dense,
                fc_reduction=args.fc_reduction,
            )
        else:
            model_config = ModelConfig(
                "vector",
                input_dim=dataset.records[0].payload.shape[0],
                dense_dims=args.dense,
                fc_reduction=args.fc_reduction,
            )
    elif model_config.input_kind == "vector":
        dim = dataset.records[0].payload.shape[0]
        if dim != model_config.input_dim:
            raise InvalidArgumentError(
                f"data dim {dim} != checkpoint input dim {model_config.input_dim}"
            )

    train_config = TrainConfig(
        margin=args.margin,
        learning_rate=args.lr,
        epochs=args.epochs,
        p=args.p,
        k=args.k,
        beta1=args.beta1,
        beta2=args.beta2,
        adam_eps=args.adam_eps,
        normalization=args.norm_mode,
        seed=args.seed,
        augment_flips=not args.no_augment,
    )
    _ensure_parent(args.out)
    ckpt_path = args.out + ".tdck"
    params, history = train(
        dataset,
        model_config,
        train_config,
        initial_params=initial_params,
        checkpoint_path=ckpt_path,
        per_epoch_checkpoints=args.per_epoch_checkpoints,
    )
    history_path = args.out + ".history.csv"
    _write_text(history_path, history.to_csv())
    _write_manifest(
        args.out + ".manifest",
        [
            ("tool_version", __version__),
            ("subcommand", "train"),
            ("data", args.data),
            ("input_kind", model_config.input_kind),
            ("input_dim", model_config.input_dim),
            ("map_shape", args.map_shape),
            ("conv_channels", model_config.conv_channels),
            ("dense", model_config.dense_dims),
            ("fc_reduction", model_config.fc_reduction),
            ("margin", args.margin),
            ("epochs", args.epochs),
            ("lr", args.lr),
            ("p", args.p),
            ("k", args.k),
            ("norm_mode", args.norm_mode),
            ("beta1", args.beta1),
            ("beta2", args.beta2),
            ("adam_eps", args.adam_eps),
            ("seed", args.seed),
            ("augment", not args.no_augment),
            ("init_from", args.init_from),
            ("per_epoch_checkpoints", args.per_epoch_checkpoints),
            ("threads", args.threads),
            ("out", args.out),
            ("checkpoint", ckpt_path),
            ("history", history_path),
        ],
    )
    final = history.epochs[-1]
    print(
        f"trained {len(history)} epochs, final mean loss {final.mean_loss:.6g}; "
        f"wrote {ckpt_path}"
    )
    return 0


def _cmd_embed(args) -> int:
    from . import dataio
    from .model import forward

    config, params, _ = dataio.load_checkpoint(args.checkpoint)
    if config.input_kind == "map":
        if args.map_shape is None:
            raise InvalidArgumentError("checkpoint takes map input; pass --map-shape H,W,C")
        if args.map_shape[2] != config.in_channels:
            raise InvalidArgumentError(
                f"--map-shape channel count {args.map_shape[2]} != checkpoint "
                f"in_channels {config.in_channels}"
            )
    elif args.map_shape is not None:
        raise InvalidArgumentError("checkpoint takes vector input; drop --map-shape")

    dataset = _load_dataset(args.data, args.map_shape, split="")
    if config.input_kind == "vector":
        dim = dataset.records[0].payload.shape[0]
        if dim != config.input_dim:
            raise InvalidArgumentError(
                f"data dim {dim} != checkpoint input dim {config.input_dim}"
            )

    out_records = []
    for start in range(0, len(dataset), _EMBED_CHUNK):
        batch = dataset.records[start : start + _EMBED_CHUNK]
        embeddings, _ = forward(params, batch)
        for rec, row in zip(batch, embeddings):
            out_records.append((rec.id, rec.label, row))
    _ensure_parent(args.out)
    out_path = args.out + ".tdml"
    dataio.write_embeddings(out_path, out_records)
    _write_manifest(
        args.out + ".manifest",
        [
            ("tool_version", __version__),
            ("subcommand", "embed"),
            ("checkpoint", args.checkpoint),
            ("data", args.data),
            ("map_shape", args.map_shape),
            ("threads", args.threads),
            ("out", args.out),
            ("embeddings", out_path),
            ("dim", config.embedding_dim),
            ("count", len(out_records)),
        ],
    )
    print(f"wrote {out_path} ({len(out_records)} embeddings, dim {config.embedding_dim})")
    return 0


def _cmd_pca(args) -> int:
    import numpy as np

    from . import dataio
    from .reduction import pca_fit, pca_transform

    fit_triples = dataio.read_embeddings(args.fit)
    if not fit_triples:
        raise DegenerateInputError(f"{args.fit} contains no records")
    fit_matrix = np.array([vec for _, _, vec in fit_triples])
    model = pca_fit(fit_matrix, args.k)

    os.makedirs(args.out_dir, exist_ok=True)
    renorm = not args.no_renorm
    outputs = []
    seen_names: set[str] = set()
    for apply_path in args.apply:
        stem = os.path.basename(apply_path)
        if stem.endswith(".tdml"):
            stem = stem[: -len(".tdml")]
        out_name = f"{stem}.k{args.k}.tdml"
        if out_name in seen_names:
            raise InvalidArgumentError(f"two --apply files would both write {out_name}")
        seen_names.add(out_name)
        triples = dataio.read_embeddings(apply_path)
        if not triples:
            raise DegenerateInputError(f"{apply_path} contains no records")
        matrix = np.array([vec for _, _, vec in triples])
        reduced = pca_transform(model, matrix, renormalize=renorm)
        out_path = os.path.join(args.out_dir, out_name)
        dataio.write_embeddings(
            out_path,
            [(t[0], t[1], row) for t, row in zip(triples, reduced)],
        )
        outputs.append((apply_path, out_path))
        print(f"wrote {out_path} ({len(triples)} records, dim {args.k})")
    entries = [
        ("tool_version", __version__),
        ("subcommand", "pca"),
        ("fit", args.fit),
        ("k", args.k),
        ("renorm", renorm),
        ("out_dir", args.out_dir),
        ("threads", args.threads),
    ]
    for i, (src, dst) in enumerate(outputs):
        entries.append((f"apply_{i}", src))
        entries.append((f"out_{i}", dst))
    _write_manifest(os.path.join(args.out_dir, f"pca.k{args.k}.manifest"), entries)
    return 0


def _cmd_evaluate(args) -> int:
    from . import dataio
    from .metrics import evaluate, format_report, report_json
    from .retrieval import build_index

    triples = dataio.read_embeddings(args.embeddings)
    if not triples:
        raise DegenerateInputError(f"{args.embeddings} contains no records")
    index = build_index(triples)
    report = evaluate(index, triples)
    text = report_json(report) if args.json else format_report(report)
    sys.stdout.write(text)
    if args.out is not None:
        _ensure_parent(args.out)
        report_path = args.out + (".report.json" if args.json else ".report.txt")
        _write_text(report_path, text)
        _write_manifest(
            args.out + ".manifest",
            [
                ("tool_version", __version__),
                ("subcommand", "evaluate"),
                ("embeddings", args.embeddings),
                ("json", args.json),
                ("threads", args.threads),
                ("out", args.out),
                ("report", report_path),
            ],
        )
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdml",
        description=(
            "Triplet metric learning pipeline: synthesize data, train an "
            "embedding model, extract embeddings, reduce with PCA, and "
            "evaluate retrieval quality."
        ),
    )
    parser.add_argument("--version", action="version", version=f"tdml {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="<command>")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads",
        type=_positive_int,
        default=1,
        help="BLAS thread cap, exported before numpy loads (default 1, "
        "the bitwise-reference mode)",
    )

    p = sub.add_parser(
        "gen-data",
        parents=[common],
        help="synthesize a clustered dataset and write train/test splits",
    )
    p.add_argument("--classes", type=_positive_int, required=True, help="number of classes (>= 2)")
    p.add_argument(
        "--per-class", type=_positive_int, required=True, help="records per class (>= 2)"
    )
    p.add_argument("--dim", type=_positive_int, required=True, help="feature dimension")
    p.add_argument(
        "--separation",
        type=float,
        default=4.0,
        help="radius of the class-center sphere (default 4.0)",
    )
    p.add_argument(
        "--spread", type=float, default=1.0, help="within-class noise stddev (default 1.0)"
    )
    p.add_argument("--seed", type=_nonneg_int, default=0, help="generator seed (default 0)")
    p.add_argument(
        "--split", type=float, default=0.5, help="train fraction per class (default 0.5)"
    )
    p.add_argument(
        "--out",
        required=True,
        help="output prefix; writes <out>.train.tdml, <out>.test.tdml, <out>.manifest",
    )
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser(
        "train", parents=[common], help="train an embedding model on a TDML dataset"
    )
    p.add_argument("--data", required=True, help="training TDML file")
    p.add_argument(
        "--out",
        required=True,
        help="output prefix; writes <out>.tdck, <out>.history.csv, <out>.manifest",
    )
    p.add_argument(
        "--dense",
        type=_dim_list,
        default=None,
        help="dense widths, comma separated (e.g. 32,16); required unless "
        "--init-from is given",
    )
    p.add_argument(
        "--map-shape",
        type=_map_shape,
        default=None,
        help="reshape flat records to H,W,C maps and use the map input path",
    )
    p.add_argument(
        "--conv-channels",
        type=_positive_int,
        default=None,
        help="3x3 conv output channels (map input only)",
    )
    p.add_argument(
        "--fc-reduction",
        type=_positive_int,
        default=None,
        help="width of a final linear reduction layer",
    )
    p.add_argument("--margin", type=float, default=0.2, help="triplet margin (default 0.2)")
    p.add_argument(
        "--epochs", type=_positive_int, default=30, help="training epochs (default 30)"
    )
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate (default 0.001)")
    p.add_argument("--p", type=_positive_int, default=10, help="classes per batch (default 10)")
    p.add_argument(
        "--k", type=_positive_int, default=3, help="records per class per batch (default 3)"
    )
    p.add_argument(
        "--norm-mode",
        choices=_NORM_MODES,
        default="sum",
        help="loss normalization (default sum)",
    )
    p.add_argument("--beta1", type=float, default=0.9, help="Adam beta1 (default 0.9)")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2 (default 0.999)")
    p.add_argument("--adam-eps", type=float, default=1e-8, help="Adam epsilon (default 1e-08)")
    p.add_argument(
        "--seed", type=_nonneg_int, default=0, help="init, batching and flip seed (default 0)"
    )
    p.add_argument(
        "--no-augment", action="store_true", help="disable random H/V flips on map inputs"
    )
    p.add_argument(
        "--init-from",
        default=None,
        help="checkpoint to warm-start from; model flags then default to its config",
    )
    p.add_argument(
        "--per-epoch-checkpoints",
        action="store_true",
        help="also write <out>.tdck.ep<n> after every epoch",
    )
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser(
        "embed",
        parents=[common],
        help="run a checkpoint over a dataset and write unit-norm embeddings",
    )
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.tdck)")
    p.add_argument("--data", required=True, help="input TDML file")
    p.add_argument(
        "--map-shape",
        type=_map_shape,
        default=None,
        help="H,W,C reshape for map-input checkpoints",
    )
    p.add_argument(
        "--out", required=True, help="output prefix; writes <out>.tdml, <out>.manifest"
    )
    p.set_defaults(handler=_cmd_embed)

    p = sub.add_parser(
        "pca", parents=[common], help="fit PCA on one embedding file and reduce others"
    )
    p.add_argument("--fit", required=True, help="embedding TDML file to fit on (train split)")
    p.add_argument(
        "--apply",
        action="append",
        required=True,
        metavar="FILE",
        help="embedding file to reduce; repeatable",
    )
    p.add_argument("--k", type=_positive_int, required=True, help="output dimension")
    p.add_argument(
        "--no-renorm", action="store_true", help="skip L2 renormalization of reduced rows"
    )
    p.add_argument(
        "--out-dir", required=True, help="directory for reduced files and the manifest"
    )
    p.set_defaults(handler=_cmd_pca)

    p = sub.add_parser(
        "evaluate", parents=[common], help="score retrieval quality of an embedding file"
    )
    p.add_argument(
        "--embeddings",
        required=True,
        help="embedding TDML file; every record queries all the others",
    )
    p.add_argument(
        "--json", action="store_true", help="print a JSON object instead of the text report"
    )
    p.add_argument(
        "--out", default=None, help="optional output prefix; writes the report and a manifest"
    )
    p.set_defaults(handler=_cmd_evaluate)

    return parser


def _export_thread_env(threads: int) -> None:
    value = str(threads)
    for name in _THREAD_ENV:
        os.environ[name] = value


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    _export_thread_env(args.threads)
    try:
        return args.handler(args)
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
