"""Command-line entry points.

Machine-readable results go to stdout as JSON, diagnostics to stderr.
Exit codes: 0 success, 1 unexpected failure, 2 usage error, and one code per
error class (see :mod:`ccpv.errors`).
"""

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import SplitSpec, build_splits, generate_synthetic_dataset, load_image, load_manifest
from .errors import CCPVError, EmptyScores
from .matching import GalleryStore, MatchRule, Pairing, enroll, verify
from .metrics import RocCurve
from .model import load_checkpoint
from .training import Framework, TrainConfig, train
from .transforms import preprocess

CONFIG_ENV = "CCPV_CONFIG"

log = logging.getLogger("ccpv")


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list = field(default_factory=list)
    payload: object = None


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_prepare_data(args):
    out = Path(args.out)
    if args.synthetic:
        images = out / "images"
        manifest = generate_synthetic_dataset(args.identities, args.images_per_palm, args.noise_sigma,
                                              images, args.seed, side=args.side)
    else:
        if not args.manifest:
            raise SystemExit("prepare-data: give --synthetic or --manifest")
        manifest = load_manifest(args.manifest)
        images = Path(args.manifest).parent
    train_set, test_set = build_splits(manifest, SplitSpec(args.train_left, args.train_right, args.seed))
    train_csv = train_set.write_csv(out / "train.csv")
    test_csv = test_set.write_csv(out / "test.csv")
    artifacts = [str(images), str(train_csv), str(test_csv)]
    log.info("train: %d samples, test: %d samples", len(train_set), len(test_set))
    _emit({"artifacts": artifacts, "n_train": len(train_set), "n_test": len(test_set)})
    return CommandResult(0, artifacts)


def _train_config(args):
    config_path = args.config or os.environ.get(CONFIG_ENV)
    flat = {}
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            flat = json.load(fh)
    overrides = {
        "framework": args.framework, "epochs": args.epochs, "seed": args.seed,
        "batch_identities": args.batch_identities, "learning_rate": args.lr,
        "tau": args.tau, "beta": args.beta, "w_ce": args.w_ce, "w_cc": args.w_cc,
        "embedding_dim": args.embedding_dim, "image_side": args.image_side,
    }
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_flat(flat)


def cmd_train(args):
    cfg = _train_config(args)
    train_set = load_manifest(args.train, require_both_hands=cfg.framework is not Framework.TRADITIONAL)
    _, report = train(cfg, train_set, out_dir=args.out)
    artifacts = [str(report.checkpoint_path), str(report.log_path)]
    _emit({"checkpoint": artifacts[0], "log": artifacts[1], "framework": cfg.framework.value,
           "epochs": report.epochs[-1], "wall_seconds": report.wall_seconds})
    return CommandResult(0, artifacts)


def cmd_eval(args):
    from .evaluation import evaluate, expand_protocols

    ckpt = load_checkpoint(args.checkpoint)
    test_set = load_manifest(args.test, require_both_hands=False)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        protocols = expand_protocols(args.protocols, test_set)
    for w in caught:
        log.warning("%s", w.message)
    reports = evaluate(ckpt, test_set, protocols, rule=args.rule, pairing=Pairing(args.pairing),
                       out_dir=args.out)
    out = Path(args.out)
    artifacts = []
    for r in reports:
        slug = r["protocol"].replace(":", "_")
        artifacts += [str(out / f"report_{slug}.json"), str(out / f"roc_{slug}.csv"),
                      str(out / f"scores_{slug}.csv")]
        log.info("%-10s EER %.4f%%  ACC %.2f%%", r["protocol"], 100 * r["eer"], 100 * r["acc"])
    _emit(reports)
    return CommandResult(0, artifacts)


def _query_image(path, ckpt):
    return preprocess(load_image(path), ckpt.model.cfg.image_side,
                      bool(ckpt.train_config.get("standardize", False)))


def cmd_enroll(args):
    ckpt = load_checkpoint(args.checkpoint)
    gallery_path = Path(args.gallery)
    if gallery_path.exists():
        store = GalleryStore.load(gallery_path)
    else:
        store = GalleryStore(ckpt.model.cfg.embedding_dim, float(ckpt.train_config.get("beta", 1.0)))
    enroll(store, args.identity, _query_image(args.image, ckpt), ckpt.model,
           chirality=args.chirality, overwrite=args.overwrite)
    store.save(gallery_path)
    artifacts = [str(gallery_path)]
    if args.export_csv:
        artifacts.append(str(store.export_csv(args.export_csv)))
    _emit({"gallery": str(gallery_path), "identity": args.identity, "size": len(store)})
    return CommandResult(0, artifacts)


def _threshold(args):
    if args.threshold is not None:
        return args.threshold
    if args.report:
        return float(json.loads(Path(args.report).read_text())["threshold"])
    raise SystemExit("verify: give --threshold or --report")


def cmd_verify(args):
    threshold = _threshold(args)
    ckpt = load_checkpoint(args.checkpoint)
    store = GalleryStore.load(args.gallery)
    accept, result = verify(store, args.identity, _query_image(args.image, ckpt), ckpt.model,
                            threshold, rule=MatchRule(args.rule), pairing=Pairing(args.pairing))
    payload = {"accept": bool(accept), "aggregate": result.aggregate, "d1": result.d1,
               "d2": result.d2, "d3": result.d3, "d4": result.d4, "threshold": threshold,
               "rule": result.rule.value}
    _emit(payload)
    log.info("%s: %s (distance %.4f, threshold %.4f)", args.identity,
             "ACCEPT" if accept else "REJECT", result.aggregate, threshold)
    return CommandResult(0, [], payload)


def cmd_plot_roc(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = []
    for path in args.csv:
        try:
            curves.append((Path(path).stem, RocCurve.from_csv(path)))
        except (KeyError, ValueError) as exc:
            raise EmptyScores(f"{path}: not a ROC CSV ({exc})") from exc
    fig, ax = plt.subplots(figsize=(5, 4))
    floor = args.far_floor
    for label, curve in curves:
        ax.step([max(f, floor) for f in curve.far], curve.gar, where="post", label=label)
    ax.set_xscale("log")
    ax.set_xlim(floor, 1.0)
    ax.set_ylim(0.0, 1.01)
    ax.set_xlabel("FAR")
    ax.set_ylabel("GAR")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the output byte-identical across runs
    fig.savefig(out, dpi=args.dpi, metadata={"Software": None})
    plt.close(fig)
    _emit({"image": str(out), "curves": [c[0] for c in curves]})
    return CommandResult(0, [str(out)])


# ---------------------------------------------------------------------------
# parser

def build_parser():
    p = argparse.ArgumentParser(prog="ccpv", description="Cross-chirality palmprint verification")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="generate or ingest a dataset and split it")
    s.add_argument("--out", required=True)
    s.add_argument("--synthetic", action="store_true")
    s.add_argument("--manifest", help="existing manifest CSV to split")
    s.add_argument("--identities", type=int, default=50)
    s.add_argument("--images-per-palm", type=int, default=10)
    s.add_argument("--noise-sigma", type=float, default=0.05)
    s.add_argument("--side", type=int, default=128)
    s.add_argument("--train-left", type=int, default=5)
    s.add_argument("--train-right", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", help="train an embedding model")
    s.add_argument("--train", required=True, help="training manifest CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV})")
    s.add_argument("--framework", choices=[f.value for f in Framework])
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-identities", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--w-ce", type=float)
    s.add_argument("--w-cc", type=float)
    s.add_argument("--embedding-dim", type=int)
    s.add_argument("--image-side", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint under verification protocols")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", required=True, help="test manifest CSV")
    s.add_argument("--protocols", default="l2r,r2l",
                   help="comma list of l2l,r2r,l2r,r2l,xspec:<a>:<b>,xdata or 'all'")
    s.add_argument("--rule", choices=[r.value for r in MatchRule])
    s.add_argument("--pairing", choices=[x.value for x in Pairing], default=Pairing.CROSS_PRODUCT.value)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("enroll", help="enroll one palm image into a gallery file")
    s.add_argument("--gallery", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--identity", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--chirality", choices=["L", "R", "U"], default="U")
    s.add_argument("--overwrite", action="store_true")
    s.add_argument("--export-csv")
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("verify", help="verify a query palm against an enrolled identity")
    s.add_argument("--gallery", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--identity", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--report", help="metrics report JSON whose EER threshold is used")
    s.add_argument("--rule", choices=[r.value for r in MatchRule], default=MatchRule.MEAN4.value)
    s.add_argument("--pairing", choices=[x.value for x in Pairing], default=Pairing.CROSS_PRODUCT.value)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("plot-roc", help="overlay ROC CSVs on a log-FAR plot")
    s.add_argument("csv", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--far-floor", type=float, default=1e-6)
    s.add_argument("--dpi", type=int, default=120)
    s.set_defaults(func=cmd_plot_roc)
    return p


def run(argv=None):
    """Parse ``argv`` and dispatch; returns a :class:`CommandResult`."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            parser.error(exc.code)
        raise
    except CCPVError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandResult(exc.exit_code)


def main(argv=None):
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
