"""``mttgan`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .dataset import DatasetError
from .gantrain import Variant, TrainingDiverged
from .nets import ShapeError

log = logging.getLogger("mttgan")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI config file (sections per stage, key = value)")
    p.add_argument("--profile", choices=sorted(ex.PROFILES), help="preset applied before the config file")
    p.add_argument("--seed", type=int, help="root seed for every derived RNG stream")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--kaggle-root", type=Path)
    p.add_argument("--covid-root", type=Path)
    p.add_argument("--covid-metadata", type=Path)
    p.add_argument("--label-map", type=Path)
    p.add_argument("--resolution", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--classifier-epochs", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


_OVERRIDES = ("seed", "output_dir", "kaggle_root", "covid_root", "covid_metadata", "label_map", "resolution",
              "pretrain_epochs", "finetune_epochs", "classifier_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mttgan", description="GAN-augmented chest X-ray screening experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="ingest, split, normalize and augment both corpora")
    _common(p)

    p = sub.add_parser("train-gan", help="train one GAN variant (pretraining is shared)")
    _common(p)
    p.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True,
                   help="train on the soft-cropped COVID pool")

    p = sub.add_parser("sample", help="render a grid of generated images")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--rows", type=int, default=5)
    p.add_argument("--cols", type=int, default=5)
    p.add_argument("--out", type=Path, required=True)

    for name, helptext in (("train-classifier", "train the classifier for one experiment"),
                           ("run-experiment", "run one experiment end to end and write its report")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--experiment", required=True, help="experiment id, e.g. binary-vgg19-mtt-real")

    p = sub.add_parser("run-matrix", help="run a list of experiments (default: all 24)")
    _common(p)
    p.add_argument("--experiments", help="comma-separated ids or id prefixes")

    p = sub.add_parser("report", help="rebuild tables and Fisher comparisons from stored bundles")
    _common(p)

    p = sub.add_parser("list-experiments", help="print the experiment ids")
    _common(p)

    p = sub.add_parser("make-demo-data", help="write small procedural corpora in the public layouts")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--per-class", type=int, default=210)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> ex.RunConfig:
    overrides = {k: getattr(args, k, None) for k in _OVERRIDES}
    if getattr(args, "experiments", None):
        overrides["experiments"] = [s.strip() for s in args.experiments.split(",") if s.strip()]
    return ex.load_config(args.config, args.profile, overrides)


def _spec(cfg: ex.RunConfig, ident: str) -> ex.ExperimentSpec:
    for spec in ex.standard_matrix(cfg.seed):
        if spec.id == ident:
            return spec
    raise ex.ConfigError(f"unknown experiment {ident!r}; see `mttgan list-experiments`")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (ex.ConfigError, ex.PrerequisiteError, DatasetError, ShapeError, TrainingDiverged) as exc:
        print(f"mttgan {args.command}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "make-demo-data":
        from .demo import write_covid_corpus, write_kaggle_corpus

        kag = write_kaggle_corpus(args.out / "chest_xray", args.per_class, seed=args.seed)
        covid, meta = write_covid_corpus(args.out / "covid", seed=args.seed)
        print(json.dumps({"kaggle_root": str(kag), "covid_root": str(covid), "covid_metadata": str(meta)}, indent=2))
        return 0

    cfg = _config(args)
    if args.command == "list-experiments":
        for spec in ex.standard_matrix(cfg.seed):
            print(spec.id)
        return 0
    if args.command == "prepare-data":
        data = ex.prepare_data(cfg)
        print(json.dumps({"kaggle_train": len(data.kaggle_train), "kaggle_test": len(data.kaggle_test),
                          "covid_train": len(data.covid_train), "covid_test": len(data.covid_test),
                          "covid_gan_pool_aug": len(data.covid_gan_pool_aug)}, indent=2))
        return 0
    if args.command == "train-gan":
        data = ex.prepare_data(cfg)
        print(ex.ensure_gan(cfg, data, args.variant, args.augment))
        return 0
    if args.command == "sample":
        print(ex.render_image_grid(args.checkpoint, args.rows, args.cols, cfg.seed, args.out, cfg.noise_policy))
        return 0
    if args.command == "train-classifier":
        spec = _spec(cfg, args.experiment)
        ex.ensure_classifier(spec, cfg, ex.prepare_data(cfg))
        print(cfg.output_dir / "classifiers" / spec.id)
        return 0
    if args.command == "run-experiment":
        bundle = ex.run_experiment(_spec(cfg, args.experiment), cfg)
        print(json.dumps(bundle.to_dict(), indent=2, sort_keys=True))
        return 0
    if args.command == "run-matrix":
        bundles = ex.run_matrix(cfg)
        failures = json.loads((cfg.output_dir / "reports" / "failures.json").read_text())
        for b in bundles:
            print(f"{b.spec.id}\t{100 * b.accuracy:.2f}%\t({b.ci.lower:.5f},{b.ci.upper:.5f})")
        for f in failures:
            print(f"FAILED {f['experiment']}: {f['error']}", file=sys.stderr)
        return 1 if failures else 0
    if args.command == "report":
        bundles = ex.load_bundles(cfg)
        if not bundles:
            raise ex.PrerequisiteError(f"no report bundles in {cfg.output_dir / 'reports'}; run `mttgan run-matrix`")
        for path in ex.write_reports(bundles, cfg):
            print(path)
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
