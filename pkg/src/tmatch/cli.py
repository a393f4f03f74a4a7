"""Command line front end.

Subcommands: check (self-verification suites), train, eval,
ablate-bnrelu (activation replacement), ablate-lambda (loss-mixing
sweep), analyze (patch export + k-means). Exit codes: 0 success,
1 failed checks or a diverged run, 2 bad usage or configuration,
3 I/O failure.

Artifact names inside --out are stable: resolved.cfg, history.csv,
best.ckpt, last.ckpt, patches.csv, centers.csv, nearest.csv,
summary.csv, plus PNG figures next to the CSVs they render
(history.png, lambda.png, entropy.png). --no-figures skips the PNGs.
"""

import argparse
import os
import sys

import numpy as np

from . import analyze as an
from . import checks
from . import data as dt
from . import net as nt
from . import train as tr
from .blocks import ActivationSpec

DATA_DIR_ENV = "TMATCH_DATA_DIR"


def _fail_usage(message):
    print(f"error: {message}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------
# shared argument groups
# ---------------------------------------------------------------------

def _add_data_args(parser):
    parser.add_argument("--data", default="synth",
                        help="'synth', 'cifar10' (uses --data-dir or $%s), "
                             "or a directory of .bin record files" % DATA_DIR_ENV)
    parser.add_argument("--data-dir", default=None,
                        help="directory with CIFAR-10 .bin files for --data cifar10")
    parser.add_argument("--synth-classes", type=int, default=4)
    parser.add_argument("--synth-samples", type=int, default=2500)
    parser.add_argument("--synth-size", type=int, default=16)
    parser.add_argument("--data-seed", type=int, default=0,
                        help="seed for synthetic data generation")


def _add_train_args(parser):
    parser.add_argument("--config", default=None,
                        help="run config file; command line flags override it")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--no-augment", action="store_true")
    parser.add_argument("--no-figures", action="store_true")


def resolve_dataset(args):
    if args.data == "synth":
        return dt.synth_dataset(args.synth_classes, args.synth_samples,
                                (args.synth_size, args.synth_size), seed=args.data_seed)
    if args.data == "cifar10":
        root = args.data_dir or os.environ.get(DATA_DIR_ENV)
        if not root:
            raise FileNotFoundError(
                f"--data cifar10 needs --data-dir or ${DATA_DIR_ENV} pointing at "
                f"the .bin record files")
        return dt.load_cifar10(root)
    return dt.load_cifar10(args.data)


def _resolve_run_config(args, dataset, template, lam_flag=None):
    """Defaults -> optional config file -> command line flags, in that order."""
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            net_cfg, train_cfg = tr.run_config_from_text(fh.read())
    else:
        net_cfg = nt.desk_config(num_classes=dataset.num_classes, template=template)
        train_cfg = tr.TrainConfig(lam=net_cfg.lam)

    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.no_augment:
        overrides["augment"] = False
    if lam_flag is not None:
        overrides["lam"] = lam_flag
    if overrides:
        fields = {k: getattr(train_cfg, k) for k in
                  ("lr", "weight_decay", "batch_size", "epochs", "seed", "lam",
                   "splits", "augment")}
        fields.update(overrides)
        train_cfg = tr.TrainConfig(**fields)

    if net_cfg.num_classes != dataset.num_classes:
        raise ValueError(
            f"config declares {net_cfg.num_classes} classes but the dataset "
            f"has {dataset.num_classes}")
    return net_cfg, train_cfg


def _echo_and_store(net_cfg, train_cfg, out_dir):
    text = tr.run_config_to_text(net_cfg, train_cfg)
    print(text, end="")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "wb") as fh:
        fh.write(text.encode("utf-8"))
    parsed = tr.run_config_from_text(text)
    if parsed != (net_cfg, train_cfg):
        raise RuntimeError("resolved config did not round-trip")
    return text


def _train_and_report(net_cfg, train_cfg, dataset, out_dir, figures):
    train_set, val_set, test_set = dt.split(dataset, train_cfg.splits,
                                            seed=train_cfg.seed)
    network = nt.build_network(net_cfg, seed=train_cfg.seed)
    history, best_epoch = tr.train_loop(network, train_set, val_set, train_cfg,
                                        out_dir=out_dir)
    print(f"trained {train_cfg.epochs} epochs on {len(train_set)} images; "
          f"best epoch {best_epoch}")
    test_acc = float("nan")
    if len(test_set) > 0:
        best = tr.checkpoint_load(os.path.join(out_dir, "best.ckpt"))
        test_acc = nt.evaluate(best, test_set.images.astype(np.float64) / 255.0,
                               test_set.labels, batch_size=train_cfg.batch_size)
        print(f"test accuracy (best checkpoint): {test_acc:.4f}")
    if figures:
        from . import report
        report.render_history_figure(os.path.join(out_dir, "history.csv"),
                                     os.path.join(out_dir, "history.png"))
    return history, test_acc


# ---------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------

def cmd_check(args):
    results = []
    if args.suite in ("solvers", "all"):
        results += checks.run_solver_checks(seed=args.seed, quick=args.quick)
    if args.suite in ("grads", "all"):
        results += checks.run_grad_checks(seed=args.seed,
                                          instances=5 if args.quick else 20)
    failed = 0
    for r in results:
        print(f"CHECK {r.name}: {'PASS' if r.passed else 'FAIL'} ({r.detail})")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def cmd_train(args):
    dataset = resolve_dataset(args)
    net_cfg, train_cfg = _resolve_run_config(args, dataset,
                                             template=not args.no_template,
                                             lam_flag=args.lam)
    _echo_and_store(net_cfg, train_cfg, args.out)
    _train_and_report(net_cfg, train_cfg, dataset, args.out,
                      figures=not args.no_figures)
    return 0


def cmd_eval(args):
    network = tr.checkpoint_load(args.checkpoint)
    dataset = resolve_dataset(args)
    if args.split == "all":
        part = dataset
    else:
        parts = dt.split(dataset, tuple(args.splits), seed=args.seed)
        part = parts[("train", "val", "test").index(args.split)]
    if len(part) == 0:
        return _fail_usage(f"split {args.split!r} is empty under fractions {args.splits}")
    print(f"checkpoint: {args.checkpoint}")
    print(f"evaluating {len(part)} images from split {args.split!r} (seed {args.seed})")
    acc = nt.evaluate(network, part.images.astype(np.float64) / 255.0, part.labels)
    print(f"top-1 accuracy: {acc:.4f}")
    return 0


def cmd_ablate_bnrelu(args):
    dataset = resolve_dataset(args)
    net_cfg, train_cfg = _resolve_run_config(args, dataset, template=False,
                                             lam_flag=0.0)
    activation = ActivationSpec(kind=args.variant, mu=args.mu, eta=args.eta,
                                eps=args.eps, samples=args.samples)
    net_cfg = nt.NetConfig(stages=net_cfg.stages, stem_width=net_cfg.stem_width,
                           num_classes=net_cfg.num_classes,
                           input_channels=net_cfg.input_channels, lam=0.0,
                           insert_block=None, activation=activation)
    if args.variant == "perturbed":
        hw = dataset.images.shape[2:]
        need = nt.perturbed_memory_bytes(net_cfg, train_cfg.batch_size, hw)
        budget = int(args.memory_budget_gb * 2 ** 30)
        if need > budget:
            return _fail_usage(
                f"perturbed activation with {args.samples} samples needs about "
                f"{need / 2**30:.2f} GiB for batch {train_cfg.batch_size} at "
                f"{hw[0]}x{hw[1]}; budget is {args.memory_budget_gb:.2f} GiB "
                f"(raise --memory-budget-gb or lower --samples)")
    _echo_and_store(net_cfg, train_cfg, args.out)
    _train_and_report(net_cfg, train_cfg, dataset, args.out,
                      figures=not args.no_figures)
    return 0


def cmd_ablate_lambda(args):
    tokens = [t.strip() for t in args.grid.split(",") if t.strip()]
    if not tokens:
        return _fail_usage("--grid must list at least one lambda value")
    grid = []
    for token in tokens:
        lam = float(token)
        if not 0.0 <= lam <= 1.0:
            return _fail_usage(f"lambda {token} outside [0, 1]")
        grid.append((token, lam))

    dataset = resolve_dataset(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for token, lam in grid:
        net_cfg, train_cfg = _resolve_run_config(args, dataset, template=True,
                                                 lam_flag=lam)
        run_dir = os.path.join(args.out, f"lambda_{token}")
        print(f"--- lambda = {token} ---")
        _echo_and_store(net_cfg, train_cfg, run_dir)
        history, test_acc = _train_and_report(net_cfg, train_cfg, dataset, run_dir,
                                              figures=False)
        val_accs = [h.val_acc for h in history]
        rows.append((token, max(val_accs) if val_accs else float("nan"), test_acc))

    summary = "lambda,val_acc,test_acc\n" + "".join(
        f"{token},{val!r},{test!r}\n" for token, val, test in rows)
    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "wb") as fh:
        fh.write(summary.encode("utf-8"))
    print(summary, end="")
    if not args.no_figures and len(rows) > 1:
        from . import report
        report.render_lambda_figure(summary_path, os.path.join(args.out, "lambda.png"))
    return 0


def cmd_analyze(args):
    network = tr.checkpoint_load(args.checkpoint)
    if network.template is None:
        return _fail_usage("analyze needs a checkpoint with a template block")
    dataset = resolve_dataset(args)
    if args.split == "all":
        part = dataset
    else:
        parts = dt.split(dataset, tuple(args.splits), seed=args.seed)
        part = parts[("train", "val", "test").index(args.split)]
    os.makedirs(args.out, exist_ok=True)
    print(f"checkpoint: {args.checkpoint}")
    print(f"exporting {args.per_class} images per class from split {args.split!r}")

    records = an.export_patches(network, part, args.per_class, seed=args.seed)
    an.write_patches_csv(records, os.path.join(args.out, "patches.csv"))
    print(f"wrote {len(records)} patch records")

    points = np.stack([r.scores for r in records])
    km = an.kmeans(points, args.centers, seed=args.seed)
    c = points.shape[1]
    counts = np.bincount(km.assignments, minlength=args.centers)
    lines = ["center_id,count," + ",".join(f"s_{i}" for i in range(c))]
    for j in range(args.centers):
        lines.append(f"{j},{counts[j]},"
                     + ",".join(repr(float(v)) for v in km.centers[j]))
    with open(os.path.join(args.out, "centers.csv"), "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
    print(f"k-means: {km.iterations} iterations, inertia {km.inertia:.6f}")

    stride = network.feature_stride()
    window = network.cfg.insert_block.patch_window
    if window is None:
        hw = network.block_input_hw(part.images.shape[2:])
        from .blocks import default_patch_window
        window = default_patch_window(*hw)
    nearest = an.nearest_patches(records, km.centers, top_n=args.top_n)
    lines = ["center_id,rank,image_index,y,x,r0,r1,c0,c1,distance"]
    for j, neighbors in enumerate(nearest):
        for rank, rec in enumerate(neighbors):
            d = float(((rec.scores - km.centers[j]) ** 2).sum())
            _, (r0, r1, c0, c1) = an.crop_patch(part.images[rec.image_index],
                                                rec.y, rec.x, window, stride)
            lines.append(f"{j},{rank},{rec.image_index},{rec.y},{rec.x},"
                         f"{r0},{r1},{c0},{c1},{d!r}")
    with open(os.path.join(args.out, "nearest.csv"), "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
    print(f"wrote nearest-patch table ({args.top_n} per center, "
          f"crops map through stride {stride}, window {window[0]}x{window[1]})")

    if not args.no_figures:
        from . import report
        report.render_entropy_figure(os.path.join(args.out, "patches.csv"),
                                     os.path.join(args.out, "entropy.png"))
    return 0


# ---------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="tmatch",
        description="Template-matching feature embedding: training, ablations "
                    "and patch analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run self-verification suites")
    p.add_argument("--suite", choices=("solvers", "grads", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true",
                   help="smaller sample counts, for smoke testing")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("train", help="train a network")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="loss mixing weight override")
    p.add_argument("--no-template", action="store_true",
                   help="train the plain baseline network")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--splits", type=float, nargs=3, default=[0.65, 0.15, 0.20],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-bnrelu", help="replace BN-ReLU activations")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--variant", required=True,
                   choices=("bn_relu", "margin_softmax", "perturbed"))
    p.add_argument("--mu", type=float, default=2.5)
    p.add_argument("--eta", type=float, default=17.0)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--memory-budget-gb", type=float, default=2.0)
    p.set_defaults(func=cmd_ablate_bnrelu)

    p = sub.add_parser("ablate-lambda", help="sweep the loss mixing weight")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--grid", default="0,0.25,0.5,0.75,1",
                   help="comma-separated lambda values")
    p.set_defaults(func=cmd_ablate_lambda)

    p = sub.add_parser("analyze", help="export patches, k-means centers, neighbors")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="train")
    p.add_argument("--splits", type=float, nargs=3, default=[0.65, 0.15, 0.20],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=80)
    p.add_argument("--centers", type=int, default=100)
    p.add_argument("--top-n", type=int, default=16)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.func(args)
    except tr.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
