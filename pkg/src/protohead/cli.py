"""Command-line entry point.

Subcommands: train, eval, explain, project, viz, gradcheck, synth. Exit codes:
0 success, 1 usage error, 2 data/format error, 3 numerical failure (non-finite
loss or a failed gradient check). All randomness in a command funnels through
its --seed flag.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import dataio, interpret, model, training
from .errors import DataFormatError, NumericalError
from .metrics import classification_metrics

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _banner(command: str, settings: dict) -> None:
    resolved = " ".join(f"{k}={v}" for k, v in settings.items())
    print(f"[{command}] {resolved}")


def cmd_train(args) -> int:
    train_set = dataio.read_gape(args.train)
    val_set = dataio.read_gape(args.val)
    head_dim = args.head_dim
    if head_dim is None:
        head_dim = model.default_head_dim(train_set.dim, args.heads)
    config = model.ModelConfig(
        dim=train_set.dim, num_prototypes=args.prototypes, num_heads=args.heads,
        head_dim=head_dim, num_classes=train_set.num_classes,
        threshold=args.threshold, seed=args.seed, prototype_init=args.init)
    tconfig = training.TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch,
        accum_steps=args.accum, seed=args.seed,
        loss_weights=training.LossWeights(args.lambda1, args.lambda2, args.lambda3))

    initial = None
    if args.resume is not None:
        initial, resume_config = model.load_checkpoint(args.resume)
        if resume_config.to_dict() != config.to_dict():
            raise DataFormatError(
                f"{args.resume}: checkpoint config {resume_config.to_dict()} does not "
                f"match the resolved flags {config.to_dict()}")

    _banner("train", {
        "train": args.train, "val": args.val, "out": args.out,
        "dim": config.dim, "classes": config.num_classes,
        "prototypes": config.num_prototypes, "heads": config.num_heads,
        "head_dim": config.head_dim, "threshold": config.threshold,
        "init": config.prototype_init, "lr": tconfig.learning_rate,
        "batch": tconfig.batch_size, "accum": tconfig.accum_steps,
        "epochs": tconfig.epochs, "lambda1": args.lambda1,
        "lambda2": args.lambda2, "lambda3": args.lambda3, "seed": args.seed,
        "resume": args.resume,
    })

    params, history = training.train(train_set, val_set, config, tconfig,
                                     initial_params=initial)
    model.save_checkpoint(params, config, args.out)
    if args.history is not None:
        with open(args.history, "w") as f:
            for record in history:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    last = history[-1]
    print(f"[train] done: epochs={len(history)} "
          f"loss_total={last['loss_total']:.6f} val_accuracy={last['val_accuracy']:.4f}")
    print(f"[train] checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, config = model.load_checkpoint(args.model)
    dataset = dataio.read_gape(args.data)
    if dataset.dim != config.dim:
        raise DataFormatError(f"{args.data}: dim {dataset.dim} does not match "
                              f"model dim {config.dim}")
    if dataset.num_classes != config.num_classes:
        raise DataFormatError(f"{args.data}: {dataset.num_classes} classes, model "
                              f"expects {config.num_classes}")
    preds = model.predict_batch(params, config, dataset.embeddings.astype(np.float64))
    metrics = classification_metrics(dataset.labels, preds, config.num_classes)
    if args.json:
        print(json.dumps(metrics, indent=2))
    else:
        print(f"accuracy      {metrics['accuracy']:.4f}")
        print(f"macro_recall  {metrics['macro_recall']:.4f}")
        print(f"macro_f1      {metrics['macro_f1']:.4f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    params, config = model.load_checkpoint(args.model)
    dataset = dataio.read_gape(args.data)
    if dataset.dim != config.dim:
        raise DataFormatError(f"{args.data}: dim {dataset.dim} does not match "
                              f"model dim {config.dim}")
    if not 0 <= args.index < dataset.count:
        print(f"error: --index {args.index} out of range for {dataset.count} samples",
              file=sys.stderr)
        return EXIT_USAGE
    projection = interpret.project_prototypes(params, dataset, metric=args.metric)
    text = dataset.texts[args.index] if dataset.texts is not None else None
    report = interpret.explain(params, config,
                               dataset.embeddings[args.index].astype(np.float64),
                               projection, text=text, sample_index=args.index)
    payload = report.to_json()
    if args.json is not None:
        with open(args.json, "w") as f:
            f.write(payload + "\n")
        print(f"[explain] report for sample {args.index} written to {args.json}")
    else:
        print(payload)
    return EXIT_OK


def cmd_project(args) -> int:
    params, config = model.load_checkpoint(args.model)
    dataset = dataio.read_gape(args.data)
    if dataset.dim != config.dim:
        raise DataFormatError(f"{args.data}: dim {dataset.dim} does not match "
                              f"model dim {config.dim}")
    projection = interpret.project_prototypes(params, dataset, metric=args.metric)
    payload = projection.to_json()
    if args.out is not None:
        with open(args.out, "w") as f:
            f.write(payload + "\n")
        print(f"[project] distinguishness={projection.distinguishness:.4f} "
              f"written to {args.out}")
    else:
        print(payload)
    return EXIT_OK


def cmd_viz(args) -> int:
    params, config = model.load_checkpoint(args.model)
    dataset = dataio.read_gape(args.data)
    if dataset.dim != config.dim:
        raise DataFormatError(f"{args.data}: dim {dataset.dim} does not match "
                              f"model dim {config.dim}")
    n, m = dataset.count, config.num_prototypes
    points = np.vstack([dataset.embeddings.astype(np.float64), params.prototypes])
    roles = ["sample"] * n + ["prototype"] * m
    indices = np.concatenate([np.arange(n), np.arange(m)])
    labels = np.concatenate([dataset.labels, np.full(m, -1, dtype=np.int64)])
    emap = interpret.tsne_embed(points, perplexity=args.perplexity,
                                iterations=args.iterations, seed=args.seed,
                                roles=roles, indices=indices, labels=labels)
    emap.to_csv(args.out)
    print(f"[viz] {n} samples + {m} prototypes mapped to 2D, written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _banner("gradcheck", {
        "dim": args.dim, "prototypes": args.prototypes, "heads": args.heads,
        "head_dim": args.head_dim, "classes": args.classes, "samples": args.samples,
        "lambda1": args.lambda1, "lambda2": args.lambda2, "lambda3": args.lambda3,
        "epsilon": args.epsilon, "seeds": args.seeds,
    })
    weights = training.LossWeights(args.lambda1, args.lambda2, args.lambda3)
    worst = 0.0
    total_excluded = 0
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        config = model.ModelConfig(
            dim=args.dim, num_prototypes=args.prototypes, num_heads=args.heads,
            head_dim=args.head_dim, num_classes=args.classes, seed=seed,
            prototype_init="gaussian")
        embeddings = rng.normal(size=(args.samples, args.dim))
        labels = rng.integers(0, args.classes, size=args.samples)
        params = model.init_params(config, rng=rng)
        result = training.finite_diff_check(params, config, embeddings, labels,
                                            embeddings, weights,
                                            epsilon=args.epsilon, seed=seed)
        print(f"[gradcheck] seed={seed} max_rel_error={result.max_rel_error:.3e} "
              f"checked={result.num_checked} excluded={result.num_excluded}")
        worst = max(worst, result.max_rel_error)
        total_excluded += result.num_excluded
    print(f"[gradcheck] overall max_rel_error={worst:.3e} excluded={total_excluded}")
    if worst >= GRADCHECK_TOLERANCE:
        print(f"[gradcheck] FAILED: {worst:.3e} >= {GRADCHECK_TOLERANCE}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = dataio.SyntheticSpec(
        num_clusters=args.clusters, per_cluster=args.per_cluster, dim=args.dim,
        center_spread=args.spread, noise_sigma=args.noise, seed=args.seed)
    dataset = dataio.gen_synthetic(spec)
    if args.test_out is not None:
        train_set, test_set = dataio.split(dataset, args.test_fraction, args.seed)
        dataio.write_gape(train_set, args.out)
        dataio.write_gape(test_set, args.test_out)
        print(f"[synth] {train_set.count} train -> {args.out}, "
              f"{test_set.count} test -> {args.test_out}")
    else:
        dataio.write_gape(dataset, args.out)
        print(f"[synth] {dataset.count} samples -> {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="protohead",
                     description="Interpretable prototype-attention classification head")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a head on a GAPE dataset")
    p.add_argument("--train", required=True, help="training GAPE file")
    p.add_argument("--val", required=True, help="validation GAPE file")
    p.add_argument("--out", required=True, help="output GAPC checkpoint")
    p.add_argument("--prototypes", type=int, default=model.DEFAULT_NUM_PROTOTYPES)
    p.add_argument("--heads", type=int, default=model.DEFAULT_NUM_HEADS)
    p.add_argument("--head-dim", type=int, default=None,
                   help="per-head width (default: ceil(dim/heads))")
    p.add_argument("--threshold", type=float, default=model.DEFAULT_THRESHOLD)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--accum", type=int, default=64)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--lambda3", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=["sample", "gaussian"], default="sample")
    p.add_argument("--history", default=None, help="write per-epoch JSONL here")
    p.add_argument("--resume", default=None, help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a GAPE dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true", help="full JSON incl. per-class")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="explain one sample's prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--json", default=None, help="output path (default: stdout)")
    p.add_argument("--metric", choices=["cosine", "neg_euclidean"], default="cosine")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("project", help="project prototypes onto the dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("--metric", choices=["cosine", "neg_euclidean"], default="cosine")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("viz", help="t-SNE map of samples + prototypes to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--prototypes", type=int, default=5)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--lambda3", type=float, default=0.1)
    p.add_argument("--epsilon", type=float, default=5e-4)
    p.add_argument("--seeds", type=int, default=5, help="check seeds 0..N-1")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic GAPE dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--per-cluster", type=int, default=250)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-out", default=None,
                   help="also write a held-out split to this path")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except DataFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
