"""Command-line front end for the watermarking toolkit.

Exit codes: 0 success (or ownership confirmed), 1 usage error, 2 I/O or
format error, 3 ownership rejected, 4 inconclusive. Every command appends
one JSON line to runs.jsonl in its output directory and writes files
atomically, so a failed run never leaves partial outputs behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import chaos, detect, ga_verify, nn, tensor_store, watermark

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_REJECTED = 3
EXIT_INCONCLUSIVE = 4

MODEL_FILE = "model.cwmt"
WATERMARKED_FILE = "watermarked.cwmt"
TUNED_FILE = "watermarked_finetuned.cwmt"
ATTACKED_FILE = "attacked.cwmt"
RUN_LOG = "runs.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _float_pair(text: str) -> tuple[float, float]:
    pieces = text.split(",")
    if len(pieces) != 2:
        raise argparse.ArgumentTypeError(f"expected LOW,HIGH, got {text!r}")
    return float(pieces[0]), float(pieces[1])


def _int_list(text: str) -> list[int]:
    try:
        return [int(piece) for piece in text.split(",") if piece.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"bad width list {text!r}") from err


def build_parser() -> _Parser:
    parser = _Parser(prog="chaosmark", description=__doc__)
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)

    def with_shared(sub, seed=True):
        sub.add_argument("--out", required=True, help="output directory")
        sub.add_argument("--config", help="JSON file with defaults; flags override it")
        if seed:
            sub.add_argument("--seed", type=int,
                             help="controls all randomness for the command")

    sub = commands.add_parser("gen-data", help="emit a synthetic blob dataset")
    sub.add_argument("--samples", type=int)
    sub.add_argument("--features", type=int)
    sub.add_argument("--classes", type=int)
    sub.add_argument("--noise", type=float)
    with_shared(sub)

    sub = commands.add_parser("train", help="train a dense net on an IDX dataset")
    sub.add_argument("--data", required=True, help="directory with features.idx/labels.idx")
    sub.add_argument("--hidden", type=_int_list, help="hidden widths, e.g. 32,16")
    sub.add_argument("--optimizer", choices=nn.OPTIMIZERS)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--momentum", type=float)
    sub.add_argument("--decay", type=float, help="L2 weight decay")
    sub.add_argument("--batch", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--holdout", type=float, help="fraction held out for metrics")
    sub.add_argument("--no-figures", action="store_const", const=True, dest="no_figures")
    with_shared(sub)

    sub = commands.add_parser("embed", help="watermark one layer of a model")
    sub.add_argument("--model", required=True, help="reference CWMT weights")
    sub.add_argument("--layer")
    sub.add_argument("--r", type=float)
    sub.add_argument("--x0", type=float)
    sub.add_argument("--epsilon", type=float)
    sub.add_argument("--manifest", required=True,
                     help="where to write the secret manifest (keep it private)")
    sub.add_argument("--finetune-data", dest="finetune_data",
                     help="optional IDX directory for post-embedding fine-tuning")
    sub.add_argument("--ft-epochs", dest="ft_epochs", type=int)
    with_shared(sub)

    sub = commands.add_parser("attack", help="fine-tune on half of unseen data")
    sub.add_argument("--model", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float, help="override the recorded base rate")
    with_shared(sub)

    sub = commands.add_parser("verify", help="recover a key and decide ownership")
    sub.add_argument("--suspect", required=True)
    sub.add_argument("--reference", required=True,
                     help="pre-watermark weights named by the manifest")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--pop", type=int)
    sub.add_argument("--gens", type=int)
    sub.add_argument("--target-cap", dest="target_cap", type=int)
    sub.add_argument("--tol-r", dest="tol_r", type=float)
    sub.add_argument("--tol-x0", dest="tol_x0", type=float)
    sub.add_argument("--tol-eps", dest="tol_eps", type=float)
    sub.add_argument("--no-figures", action="store_const", const=True, dest="no_figures")
    with_shared(sub)

    sub = commands.add_parser("density", help="weight density tables and figure")
    sub.add_argument("models", nargs="+")
    sub.add_argument("--layer", required=True)
    sub.add_argument("--bins", type=int)
    sub.add_argument("--span", type=_float_pair, help="shared LOW,HIGH bin range")
    sub.add_argument("--no-figures", action="store_const", const=True, dest="no_figures")
    with_shared(sub, seed=False)

    sub = commands.add_parser("detect", help="tell models apart from activations")
    sub.add_argument("--original", required=True)
    sub.add_argument("--watermarked", required=True)
    sub.add_argument("--finetuned", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--layer", required=True)
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--train-fraction", dest="train_fraction", type=float)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--no-figures", action="store_const", const=True, dest="no_figures")
    with_shared(sub)

    return parser


DEFAULTS = {
    "gen-data": {"samples": 2000, "features": 16, "classes": 4, "noise": 0.08,
                 "seed": None},
    "train": {"hidden": [32, 16], "optimizer": "sgd", "lr": 0.1, "momentum": 0.9,
              "decay": 1e-3, "batch": 64, "epochs": 30, "holdout": 0.2,
              "seed": None, "no_figures": False},
    "embed": {"layer": "dense1/kernel", "r": 3.9, "x0": 0.5, "epsilon": 0.01,
              "ft_epochs": 5, "seed": None},
    "attack": {"epochs": 3, "lr": None, "seed": None},
    "verify": {"pop": 200, "gens": 300, "target_cap": 4096, "tol_r": 0.05,
               "tol_x0": 0.05, "tol_eps": 0.005, "seed": None, "no_figures": False},
    "density": {"bins": 100, "span": None, "no_figures": False},
    "detect": {"threshold": 0.9, "train_fraction": 0.7, "lr": 1.0, "epochs": 400,
               "seed": None, "no_figures": False},
}


def resolve_options(args) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(DEFAULTS[args.command])
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as handle:
                overrides = json.load(handle)
        except FileNotFoundError as err:
            raise UsageError(f"config file not found: {args.config}") from err
        except json.JSONDecodeError as err:
            raise tensor_store.FormatError(f"config is not valid JSON: {err}") from err
        if not isinstance(overrides, dict):
            raise tensor_store.FormatError("config must be a JSON object")
        for key, value in overrides.items():
            slot = key.replace("-", "_")
            if slot in resolved:
                resolved[slot] = value
    for key in resolved:
        given = getattr(args, key, None)
        if given is not None:
            resolved[key] = given
    return resolved


def pick_seed(options: dict) -> int:
    if options.get("seed") is None:
        options["seed"] = int.from_bytes(os.urandom(4), "little")
        print(f"seed not given; using {options['seed']}")
    return int(options["seed"])


def append_run_record(out_dir, record: dict) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, RUN_LOG), "a", encoding="utf-8") as handle:
            handle.write(json.dumps(record) + "\n")
    except OSError as err:
        print(f"warning: could not append run record: {err}", file=sys.stderr)


def _require_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return os.fspath(path)


def _base_train_config(options: dict, seed: int) -> nn.TrainConfig:
    return nn.TrainConfig(
        optimizer=options["optimizer"],
        learning_rate=float(options["lr"]),
        momentum=float(options["momentum"]),
        weight_decay=float(options["decay"]),
        batch_size=int(options["batch"]),
        epochs=int(options["epochs"]),
        seed=seed,
    )


def cmd_gen_data(args, options, record) -> int:
    seed = pick_seed(options)
    out = _require_dir(args.out)
    data = nn.make_blobs(int(options["samples"]), int(options["features"]),
                         int(options["classes"]), seed=seed,
                         noise=float(options["noise"]))
    nn.save_dataset_dir(data, out)
    record["outputs"] = [os.path.join(out, nn.FEATURES_FILE),
                         os.path.join(out, nn.LABELS_FILE)]
    print(f"wrote {data.n_samples} samples, {data.features.shape[1]} features, "
          f"{data.class_count} classes to {out}")
    return EXIT_OK


def cmd_train(args, options, record) -> int:
    seed = pick_seed(options)
    out = _require_dir(args.out)
    data = nn.load_dataset_dir(args.data)
    config = _base_train_config(options, seed)
    holdout_fraction = float(options["holdout"])
    training, holdout = nn.split_dataset(data, 1.0 - holdout_fraction)
    net = nn.build_net(data.features.shape[1], list(options["hidden"]),
                       data.class_count, seed=seed)
    trained, losses = nn.train(net, training, config)
    metrics = nn.evaluate(trained, holdout)

    model_path = os.path.join(out, MODEL_FILE)
    nn.save_model(trained, model_path, config)
    nn.save_metrics_csv(metrics, os.path.join(out, "metrics.csv"))
    tensor_store.atomic_write_text(os.path.join(out, "metrics.txt"),
                                   nn.format_metrics(metrics))
    tensor_store.atomic_write_text(
        os.path.join(out, "loss_trace.csv"),
        "epoch,mean_loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)),
    )
    record["outputs"] = [model_path, nn.arch_path(model_path),
                         os.path.join(out, "metrics.csv"),
                         os.path.join(out, "metrics.txt"),
                         os.path.join(out, "loss_trace.csv")]
    if not options["no_figures"]:
        from . import report

        figure = os.path.join(out, "fig_loss.png")
        report.save_loss_figure(losses, figure)
        record["outputs"].append(figure)
    print(f"holdout accuracy {metrics.accuracy:.4f}; model at {model_path}")
    return EXIT_OK


def cmd_embed(args, options, record) -> int:
    pick_seed(options)
    out = _require_dir(args.out)
    reference = tensor_store.load_weights(args.model)
    params = chaos.ChaoticParams(float(options["r"]), float(options["x0"]),
                                 float(options["epsilon"]))
    marked, manifest = embed_with_id(reference, options["layer"], params, args.model)
    marked_path = os.path.join(out, WATERMARKED_FILE)
    tensor_store.save_weights(marked, marked_path)
    tensor_store.save_manifest(manifest, args.manifest)
    record["outputs"] = [marked_path, os.fspath(args.manifest)]
    sidecar = nn.arch_path(args.model)
    if os.path.exists(sidecar):
        with open(sidecar, "rb") as handle:
            tensor_store.atomic_write_bytes(nn.arch_path(marked_path), handle.read())
        record["outputs"].append(nn.arch_path(marked_path))
    if args.finetune_data:
        data = nn.load_dataset_dir(args.finetune_data)
        net, train_config = nn.load_model(marked_path)
        if train_config is None:
            raise tensor_store.FormatError(
                "fine-tuning needs the training settings recorded alongside the model"
            )
        tuned = nn.fine_tune(net, data, train_config, int(options["ft_epochs"]))
        tuned_path = os.path.join(out, TUNED_FILE)
        nn.save_model(tuned, tuned_path, train_config)
        record["outputs"].extend([tuned_path, nn.arch_path(tuned_path)])
    print(f"marked layer {manifest.layer!r}; manifest at {args.manifest} "
          "(store it away from the weights)")
    return EXIT_OK


def cmd_attack(args, options, record) -> int:
    seed = pick_seed(options)
    out = _require_dir(args.out)
    net, train_config = nn.load_model(args.model)
    if train_config is None:
        raise tensor_store.FormatError(
            "model has no recorded training settings; cannot derive the tuning rate"
        )
    if options["lr"] is not None:
        train_config.learning_rate = float(options["lr"])
    train_config.seed = seed
    data = nn.load_dataset_dir(args.data)
    attacked, before, after = nn.finetune_attack(net, data, train_config,
                                                 int(options["epochs"]))
    attacked_path = os.path.join(out, ATTACKED_FILE)
    nn.save_model(attacked, attacked_path, train_config)
    tensor_store.atomic_write_text(
        os.path.join(out, "accuracy.csv"),
        f"measure,value\naccuracy_before,{before!r}\naccuracy_after,{after!r}\n",
    )
    record["outputs"] = [attacked_path, nn.arch_path(attacked_path),
                         os.path.join(out, "accuracy.csv")]
    print(f"held-back accuracy {before:.4f} -> {after:.4f}; attacked model at "
          f"{attacked_path}")
    return EXIT_OK


def cmd_verify(args, options, record) -> int:
    seed = pick_seed(options)
    out = _require_dir(args.out)
    suspect = tensor_store.load_weights(args.suspect)
    reference = tensor_store.load_weights(args.reference)
    manifest = tensor_store.load_manifest(args.manifest)
    warnings = tensor_store.check_manifest(manifest, reference)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    delta = watermark.extract(suspect, reference, manifest.layer)
    config = ga_verify.GAConfig(
        population=int(options["pop"]),
        generations=int(options["gens"]),
        target_cap=int(options["target_cap"]),
        seed=seed,
    )
    report_data = ga_verify.run_ga(delta, config)
    tolerances = (float(options["tol_r"]), float(options["tol_x0"]),
                  float(options["tol_eps"]))
    decision = ga_verify.decide_ownership(report_data, manifest.params, tolerances)
    tensor_store.atomic_write_text(os.path.join(out, "report.txt"),
                                   ga_verify.format_report(report_data, warnings))
    ga_verify.save_trace_csv(report_data, os.path.join(out, "trace.csv"))
    record["outputs"] = [os.path.join(out, "report.txt"),
                         os.path.join(out, "trace.csv")]
    if not options["no_figures"]:
        from . import report

        figure = os.path.join(out, "fig_trace.png")
        report.save_trace_figure(report_data.trace, figure)
        record["outputs"].append(figure)
    print(f"decision: {decision} (recovered r={report_data.best.r:.6f} "
          f"x0={report_data.best.x0:.6f} epsilon={report_data.best.epsilon:.6f})")
    record["decision"] = decision
    if decision == ga_verify.CONFIRMED:
        return EXIT_OK
    if decision == ga_verify.REJECTED:
        return EXIT_REJECTED
    return EXIT_INCONCLUSIVE


def _density_label(path: str, used: set) -> str:
    stem = os.path.splitext(os.path.basename(path))[0]
    label = stem
    counter = 2
    while label in used:
        label = f"{stem}_{counter}"
        counter += 1
    used.add(label)
    return label


def cmd_density(args, options, record) -> int:
    out = _require_dir(args.out)
    used: set = set()
    densities = []
    failures = []
    record["outputs"] = []
    for path in args.models:
        label = _density_label(path, used)
        weights = tensor_store.load_weights(path)
        try:
            density = watermark.density_histogram(
                weights, args.layer, bin_count=int(options["bins"]),
                value_range=options["span"], label=label,
            )
        except watermark.ZeroRangeError as err:
            failures.append(f"{label}: {err}")
            continue
        table = os.path.join(out, f"density_{label}.csv")
        watermark.save_density_table(density, table)
        densities.append(density)
        record["outputs"].append(table)
    for failure in failures:
        print(f"error: {failure}", file=sys.stderr)
    if densities and not options["no_figures"]:
        from . import report

        figure = os.path.join(out, "fig_density.png")
        report.save_density_figure(densities, figure,
                                   title=f"density of {args.layer}")
        record["outputs"].append(figure)
    print(f"wrote {len(densities)} density tables to {out}")
    return EXIT_DATA if failures else EXIT_OK


def cmd_detect(args, options, record) -> int:
    seed = pick_seed(options)
    out = _require_dir(args.out)
    nets = []
    for path in (args.original, args.watermarked, args.finetuned):
        net, _ = nn.load_model(path)
        nets.append(net)
    data = nn.load_dataset_dir(args.data)
    # split the inputs, not the stacked rows: every input feeds all three
    # models, so a row-level split would leak each eval input into training
    rng = np.random.default_rng(seed)
    order = rng.permutation(data.n_samples)
    cut = int(np.ceil(data.n_samples * float(options["train_fraction"])))
    if cut == data.n_samples:
        raise UsageError("train fraction leaves nothing to evaluate on")
    threshold = float(options["threshold"])
    train_rows = detect.collect_feature_set(nets, data.features[order[:cut]],
                                            args.layer, threshold)
    eval_rows = detect.collect_feature_set(nets, data.features[order[cut:]],
                                           args.layer, threshold)
    model = detect.train_logreg(
        train_rows,
        learning_rate=float(options["lr"]),
        epochs=int(options["epochs"]),
    )
    predicted, _ = detect.classify(model, eval_rows.features)
    matrix = detect.confusion(eval_rows.labels, predicted, len(nets))
    names = ["original", "watermarked", "finetuned"]
    detect.save_confusion_csv(matrix, os.path.join(out, "confusion.csv"), names)
    summary = [
        f"held-out accuracy: {matrix.accuracy!r}",
        f"threshold: {threshold}",
    ]
    for name, kept, discarded in zip(names, eval_rows.kept_counts,
                                     eval_rows.discarded_counts):
        summary.append(f"{name} (eval split): kept {kept}, discarded {discarded}")
    tensor_store.atomic_write_text(os.path.join(out, "detect_summary.txt"),
                                   "\n".join(summary) + "\n")
    record["outputs"] = [os.path.join(out, "confusion.csv"),
                         os.path.join(out, "detect_summary.txt")]
    if not options["no_figures"]:
        from . import report

        figure = os.path.join(out, "fig_confusion.png")
        report.save_confusion_figure(matrix, figure, names)
        record["outputs"].append(figure)
    print(f"detection accuracy {matrix.accuracy:.4f}; confusion at "
          f"{os.path.join(out, 'confusion.csv')}")
    return EXIT_OK


def embed_with_id(reference, layer, params, model_path):
    model_id = os.path.splitext(os.path.basename(os.fspath(model_path)))[0]
    return watermark.embed(reference, layer, params, model_id=model_id)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "embed": cmd_embed,
    "attack": cmd_attack,
    "verify": cmd_verify,
    "density": cmd_density,
    "detect": cmd_detect,
}


def main(argv=None) -> int:
    parser = build_parser()
    started = time.perf_counter()
    record = {"argv": list(argv) if argv is not None else sys.argv[1:]}
    out_dir = None
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a command is required (see --help)")
        out_dir = args.out
        record["command"] = args.command
        options = resolve_options(args)
        # aliased on purpose: pick_seed fills in a drawn seed later and the
        # run log must show the value the command actually used
        record["options"] = options
        code = COMMANDS[args.command](args, options, record)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        code = EXIT_USAGE
    except chaos.InvalidParamsError as err:
        print(f"invalid parameters: {err}", file=sys.stderr)
        code = EXIT_USAGE
    except ValueError as err:
        print(f"invalid value: {err}", file=sys.stderr)
        code = EXIT_USAGE
    except (tensor_store.TensorStoreError, OSError,
            nn.TrainingDivergedError) as err:
        print(f"error: {err}", file=sys.stderr)
        code = EXIT_DATA
    record["exit_status"] = code
    record["duration_s"] = round(time.perf_counter() - started, 6)
    if out_dir:
        append_run_record(out_dir, record)
    return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
