"""Experiment runner: data prep, GAN variants, synthetic sets, classifiers, reports.

All artifacts live under ``RunConfig.output_dir``::

    data/        normalized manifests, image cache, GAN training pools
    gan/         pretrain/ plus one directory per (variant, augmentation)
    synthetic/   generated COVID manifests, one per GAN
    classifiers/ one directory per experiment
    grids/       sample image grids
    reports/     per-experiment JSON bundles, tables, Fisher comparisons

Shared stages are built only when absent; each stage directory is assembled
under a temporary name and published with an atomic rename.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .clstrain import ClassifierConfig, TrainedClassifier, evaluate, load_classifier, save_classifier, train_classifier
from .dataset import (
    AugmentConfig, DatasetManifest, Label, SplitSpec, build_training_set,
    check_leakage, concat, ingest_covid, ingest_kaggle, load_label_map, normalize_manifest,
    read_manifest, save_grayscale, soft_crop_augment, resize_to, split_holdout, subsample_per_class, write_manifest,
)
from .gantrain import GanResult, GanTrainConfig, Variant, generate_dataset, train
from .nets import ShapeError, checkpoint_header, load_weights, save_weights, spec_from_name
from .stats import BinomialCI, ConfusionMatrix, FisherResult, accuracy, ci_note, clopper_pearson, compare_accuracies

log = logging.getLogger(__name__)

ENV_OVERRIDES = {
    "MTTGAN_KAGGLE_ROOT": "kaggle_root",
    "MTTGAN_COVID_ROOT": "covid_root",
    "MTTGAN_COVID_METADATA": "covid_metadata",
    "MTTGAN_OUTPUT_DIR": "output_dir",
}


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    """A required earlier stage has not been run."""


class Task(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"

    @property
    def num_classes(self) -> int:
        return 2 if self is Task.BINARY else 4


class Composition(str, Enum):
    GENERATED_ONLY = "generated_only"
    REAL_PLUS_GENERATED = "real_plus_generated"


@dataclass
class RunConfig:
    kaggle_root: Path | None = None
    covid_root: Path | None = None
    covid_metadata: Path | None = None
    label_map: Path | None = None
    output_dir: Path = Path("runs/default")
    resolution: int = 128
    seed: int = 0
    experiments: list[str] = field(default_factory=lambda: ["all"])
    # data
    holdout: int = 68
    max_real_per_class: int | None = None
    kaggle_aug_factor: int = 5
    covid_aug_factor: int = 50
    max_crop_frac: float = 0.05
    pretrain_augmented: bool = True
    classifier_augmented: bool = False
    # gan
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    ema_alpha: float = 0.999
    noise_policy: str = "clipped_gaussian"
    gan_batch_size: int = 32
    gan_lr: float = 1e-5
    gan_filters: int = 128
    disc_filters: int = 64
    # classifier
    classifier_epochs: int = 50
    classifier_batch_size: int = 32
    classifier_lr: float = 1e-5
    val_fraction: float = 0.3
    per_class: int = 1400
    real_covid: int = 159
    grid_rows: int = 5
    grid_cols: int = 5

    def validate(self) -> "RunConfig":
        if self.resolution < 32 or self.resolution % 32:
            raise ConfigError(f"resolution must be a positive multiple of 32 (generator, discriminator and "
                              f"classifier traces must agree), got {self.resolution}")
        if not 0 <= self.real_covid <= self.per_class:
            raise ConfigError("real_covid must lie in [0, per_class]")
        return self

    def gan_config(self, variant: Variant | str) -> GanTrainConfig:
        return GanTrainConfig(
            variant=Variant(variant), batch_size=self.gan_batch_size, lr=self.gan_lr,
            pretrain_epochs=self.pretrain_epochs, finetune_epochs=self.finetune_epochs, ema_alpha=self.ema_alpha,
            noise_policy=self.noise_policy, seed=self.seed, resolution=self.resolution,
            gen_filters=self.gan_filters, disc_filters=self.disc_filters,
        )

    def to_dict(self) -> dict:
        return {k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(self).items()}


PROFILES: dict[str, dict] = {
    "full": {},
    # CI-speed preset; results are smoke-level only
    "desk": {
        "resolution": 32, "pretrain_epochs": 3, "finetune_epochs": 3, "classifier_epochs": 3,
        "max_real_per_class": 200, "per_class": 64, "real_covid": 7,
        "pretrain_augmented": False, "covid_aug_factor": 2, "gan_filters": 32, "disc_filters": 16,
    },
}


def _coerce(name: str, raw: str):
    ftype = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    text = raw.strip()
    if "list" in ftype:
        return [s.strip() for s in text.split(",") if s.strip()]
    if "None" in ftype and text.lower() in ("", "none"):
        return None
    if "Path" in ftype:
        return Path(text).expanduser()
    if ftype.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: not a boolean: {raw!r}")
    if ftype.startswith("int"):
        return int(text)
    if ftype.startswith("float"):
        return float(text)
    return text


def load_config(path: str | Path | None = None, profile: str | None = None, overrides: dict | None = None,
                env: dict | None = None) -> RunConfig:
    """Defaults < profile < config file < environment < explicit overrides.

    The config file is INI-style; keys may appear in any section (``[data]``,
    ``[gan]``, ``[classifier]``, ``[run]``) and name RunConfig fields. A
    ``profile`` key in ``[run]`` selects a preset when none is passed.
    """
    values: dict = {}
    file_values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        known = {f.name for f in dataclasses.fields(RunConfig)}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key == "profile":
                    profile = profile or raw.strip()
                    continue
                if key not in known:
                    raise ConfigError(f"unknown config key [{section}] {key}")
                file_values[key] = _coerce(key, raw)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    values.update(file_values)
    for var, name in ENV_OVERRIDES.items():
        source = os.environ if env is None else env
        if source.get(var):
            values[name] = _coerce(name, source[var])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------- #
# experiment specs


@dataclass(frozen=True)
class ExperimentSpec:
    id: str
    task: Task
    gan_variant: Variant
    gan_augmentation: bool
    covid_composition: Composition
    classifier: str
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "gan_variant", Variant(self.gan_variant))
        object.__setattr__(self, "covid_composition", Composition(self.covid_composition))

    def counts(self, cfg: RunConfig) -> tuple[int, int]:
        """(real, generated) COVID images; they sum to ``cfg.per_class``."""
        if self.covid_composition is Composition.GENERATED_ONLY:
            return 0, cfg.per_class
        return cfg.real_covid, cfg.per_class - cfg.real_covid

    @property
    def gan_key(self) -> str:
        return f"{self.gan_variant.value}-{'aug' if self.gan_augmentation else 'noaug'}"

    def to_dict(self) -> dict:
        return {"id": self.id, "task": self.task.value, "gan_variant": self.gan_variant.value,
                "gan_augmentation": self.gan_augmentation, "covid_composition": self.covid_composition.value,
                "classifier": self.classifier, "seed": self.seed}


# (row key, variant, augmentation, composition, table label)
MATRIX_ROWS = (
    ("baseline-noaug-gen", Variant.BASELINE, False, Composition.GENERATED_ONLY,
     "Baseline (without augmentation), generated only"),
    ("baseline-aug-gen", Variant.BASELINE, True, Composition.GENERATED_ONLY,
     "Baseline (with augmentation), generated only"),
    ("transfer-gen", Variant.TRANSFER, True, Composition.GENERATED_ONLY, "Transfer GAN, generated only"),
    ("transfer-real", Variant.TRANSFER, True, Composition.REAL_PLUS_GENERATED, "Transfer GAN, real + generated"),
    ("mtt-gen", Variant.MTT, True, Composition.GENERATED_ONLY, "MTT-GAN, generated only"),
    ("mtt-real", Variant.MTT, True, Composition.REAL_PLUS_GENERATED, "MTT-GAN, real + generated"),
)
ROW_LABELS = {key: label for key, *_, label in MATRIX_ROWS}
FISHER_PAIRS = [(m, b) for m in ("mtt-gen", "mtt-real") for b in ("baseline-noaug-gen", "baseline-aug-gen")]


def standard_matrix(seed: int = 0) -> list[ExperimentSpec]:
    """Six rows × two classifiers × two tasks."""
    specs = []
    for task in Task:
        for arch in ("vgg19", "alexnet"):
            for key, variant, aug, comp, _ in MATRIX_ROWS:
                specs.append(ExperimentSpec(f"{task.value}-{arch}-{key}", task, variant, aug, comp, arch, seed))
    return specs


def select_experiments(cfg: RunConfig) -> list[ExperimentSpec]:
    specs = standard_matrix(cfg.seed)
    wanted = cfg.experiments or ["all"]
    if "all" in wanted:
        return specs
    by_id = {s.id: s for s in specs}
    unknown = [w for w in wanted if w not in by_id and not any(s.id.startswith(w) for s in specs)]
    if unknown:
        raise ConfigError(f"unknown experiment ids {unknown}")
    return [s for s in specs if s.id in wanted or any(s.id.startswith(w) and w not in by_id for w in wanted)]


def row_key(spec: ExperimentSpec) -> str:
    return spec.id.split("-", 2)[2]


# --------------------------------------------------------------------------- #
# stage plumbing


@contextmanager
def _publish_dir(final: Path):
    """Build into a scratch directory, then atomically rename to ``final``."""
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.with_name(f".{final.name}.tmp-{os.getpid()}")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    try:
        os.rename(tmp, final)
    except OSError:
        # another process published first
        shutil.rmtree(tmp, ignore_errors=True)


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def _stage_ready(directory: Path, fingerprint: dict) -> bool:
    marker = directory / "DONE.json"
    if not marker.exists():
        return False
    recorded = json.loads(marker.read_text())
    if recorded != fingerprint:
        raise ConfigError(f"{directory} was built with a different configuration; use a fresh output directory")
    return True


_DATA_KEYS = ("resolution", "seed", "holdout", "max_real_per_class", "kaggle_aug_factor", "covid_aug_factor",
              "max_crop_frac", "pretrain_augmented", "classifier_augmented")
_GAN_KEYS = _DATA_KEYS + ("pretrain_epochs", "finetune_epochs", "ema_alpha", "noise_policy", "gan_batch_size",
                          "gan_lr", "gan_filters", "disc_filters")


def _fingerprint(cfg: RunConfig, keys: Iterable[str], **extra) -> dict:
    d = cfg.to_dict()
    return {**{k: d[k] for k in keys}, **extra}


@dataclass
class PreparedData:
    kaggle_train: DatasetManifest
    kaggle_test: DatasetManifest
    covid_train: DatasetManifest
    covid_test: DatasetManifest
    kaggle_gan_pool: DatasetManifest
    covid_gan_pool_aug: DatasetManifest
    kaggle_classifier_pool: DatasetManifest

    def test_set(self, task: Task) -> DatasetManifest:
        parts = [self.covid_test]
        if task is Task.BINARY:
            parts.append(self.kaggle_test.by_label(Label.NORMAL))
        else:
            parts.append(self.kaggle_test)
        return concat(parts, f"test {task.value}")

    @property
    def test_ids(self) -> set[str]:
        return self.kaggle_test.ids | self.covid_test.ids

    def covid_gan_pool(self, augmented: bool) -> DatasetManifest:
        return self.covid_gan_pool_aug if augmented else self.covid_train


_DATA_FILES = ("kaggle_train", "kaggle_test", "covid_train", "covid_test", "kaggle_gan_pool",
               "covid_gan_pool_aug", "kaggle_classifier_pool")


def _normalize_and_augment(manifest: DatasetManifest, size: int, aug: AugmentConfig | None):
    """Resize every record and, with ``aug``, soft-crop it at native resolution."""
    normalized, children = [], []
    for rec in manifest:
        native = rec.materialize()
        normalized.append(resize_to(native, size))
        if aug is not None:
            children.extend(soft_crop_augment(native, aug, size))
    note = manifest.provenance_note
    aug_manifest = DatasetManifest(tuple(children), f"{note} | soft-crop x{aug.factor}") if aug else None
    return DatasetManifest(tuple(normalized), note), aug_manifest


def prepare_data(cfg: RunConfig) -> PreparedData:
    """Ingest, cap, split, normalize and augment both corpora (build-if-absent)."""
    root = cfg.output_dir / "data"
    fingerprint = _fingerprint(cfg, _DATA_KEYS)
    if _stage_ready(root, fingerprint):
        return PreparedData(*(read_manifest(root / f"{n}.jsonl", materialize=True) for n in _DATA_FILES))
    missing = [n for n in ("kaggle_root", "covid_root", "covid_metadata") if getattr(cfg, n) is None]
    if missing:
        raise PrerequisiteError(f"data not prepared in {root}; set {', '.join(missing)} "
                                f"(flags, config file or MTTGAN_* environment) and run `mttgan prepare-data`")
    label_map = load_label_map(cfg.label_map) if cfg.label_map else None
    kaggle = subsample_per_class(ingest_kaggle(cfg.kaggle_root, label_map), cfg.max_real_per_class, cfg.seed)
    covid = subsample_per_class(ingest_covid(cfg.covid_root, cfg.covid_metadata), cfg.max_real_per_class, cfg.seed)
    split = SplitSpec(cfg.holdout, cfg.seed)
    k_train, k_test = split_holdout(kaggle, split)
    c_train, c_test = split_holdout(covid, split)

    res = cfg.resolution
    k_aug = AugmentConfig(cfg.kaggle_aug_factor, cfg.max_crop_frac, cfg.seed)
    c_aug = AugmentConfig(cfg.covid_aug_factor, cfg.max_crop_frac, cfg.seed)
    need_k_aug = cfg.pretrain_augmented or cfg.classifier_augmented
    k_train_n, k_train_aug = _normalize_and_augment(k_train, res, k_aug if need_k_aug else None)
    c_train_n, c_train_aug = _normalize_and_augment(c_train, res, c_aug)
    k_test_n = normalize_manifest(k_test, res)
    c_test_n = normalize_manifest(c_test, res)
    k_gan = k_train_aug if cfg.pretrain_augmented else k_train_n
    k_cls = k_train_aug if cfg.classifier_augmented else k_train_n

    test_ids = k_test_n.ids | c_test_n.ids
    for pool in (k_train_n, c_train_n, k_gan, c_train_aug, k_cls):
        check_leakage(pool, test_ids)

    manifests = dict(kaggle_train=k_train_n, kaggle_test=k_test_n, covid_train=c_train_n, covid_test=c_test_n,
                     kaggle_gan_pool=k_gan, covid_gan_pool_aug=c_train_aug, kaggle_classifier_pool=k_cls)
    if root.exists():
        shutil.rmtree(root)
    with _publish_dir(root) as tmp:
        for name, m in manifests.items():
            write_manifest(m, tmp / f"{name}.jsonl", tmp / "images")
        _write_json(tmp / "DONE.json", fingerprint)
    log.info("prepared data in %s: %s", root,
             {k: len(v) for k, v in manifests.items()})
    return PreparedData(*(manifests[n] for n in _DATA_FILES))


def _load_gan_dir(directory: Path) -> tuple[Path, Path]:
    return directory / "generator.safetensors", directory / "discriminator.safetensors"


def ensure_pretrained(cfg: RunConfig, data: PreparedData, train_missing: bool = True) -> GanResult:
    directory = cfg.output_dir / "gan" / "pretrain"
    gcfg = cfg.gan_config(Variant.TRANSFER)
    fingerprint = _fingerprint(cfg, _GAN_KEYS, stage="pretrain")
    if not _stage_ready(directory, fingerprint):
        if not train_missing:
            raise PrerequisiteError(f"pretrained GAN missing in {directory}; run `mttgan train-gan --variant transfer`")
        from .gantrain import pretrain  # noqa: PLC0415

        if directory.exists():
            shutil.rmtree(directory)
        with _publish_dir(directory) as tmp:
            check_leakage(data.kaggle_gan_pool, data.test_ids)
            res = pretrain(gcfg, data.kaggle_gan_pool, checkpoint_dir=tmp / "checkpoints", log_path=tmp / "train_log.csv")
            g_path, d_path = _load_gan_dir(tmp)
            save_weights(res.generator, g_path)
            save_weights(res.discriminator, d_path)
            _write_json(tmp / "DONE.json", fingerprint)
    g_path, d_path = _load_gan_dir(directory)
    g = load_weights(g_path, gcfg.generator_spec())
    d = load_weights(d_path, gcfg.discriminator_spec())
    return GanResult(g, d, [], None)


def ensure_gan(cfg: RunConfig, data: PreparedData, variant: Variant | str, augmented: bool,
               train_missing: bool = True) -> Path:
    """Directory holding ``generator.safetensors`` for one (variant, augmentation) cell."""
    variant = Variant(variant)
    key = f"{variant.value}-{'aug' if augmented else 'noaug'}"
    directory = cfg.output_dir / "gan" / key
    fingerprint = _fingerprint(cfg, _GAN_KEYS, stage=key)
    if _stage_ready(directory, fingerprint):
        return directory
    if not train_missing:
        raise PrerequisiteError(f"GAN checkpoint for {key} missing in {directory}; run "
                                f"`mttgan train-gan --variant {variant.value} {'--augment' if augmented else '--no-augment'}`")
    pool = data.covid_gan_pool(augmented)
    check_leakage(pool, data.test_ids)
    pretrained = ensure_pretrained(cfg, data) if variant is not Variant.BASELINE else None
    if directory.exists():
        shutil.rmtree(directory)
    with _publish_dir(directory) as tmp:
        res = train(cfg.gan_config(variant), None, pool, pretrained=pretrained,
                    checkpoint_dir=tmp / "checkpoints", log_path=tmp / "train_log.csv")
        g_path, d_path = _load_gan_dir(tmp)
        save_weights(res.generator, g_path)
        save_weights(res.discriminator, d_path)
        _write_json(tmp / "DONE.json", fingerprint)
    return directory


def ensure_synthetic(cfg: RunConfig, gan_dir: Path, key: str) -> DatasetManifest:
    """Generated COVID set for one GAN, shared by every experiment that uses it."""
    directory = cfg.output_dir / "synthetic" / key
    fingerprint = _fingerprint(cfg, _GAN_KEYS, stage=key, n=cfg.per_class)
    if not _stage_ready(directory, fingerprint):
        gcfg = cfg.gan_config(key.split("-")[0])
        generator = load_weights(gan_dir / "generator.safetensors", gcfg.generator_spec())
        synth = generate_dataset(generator, cfg.per_class, gcfg, seed=cfg.seed, tag=key)
        if directory.exists():
            shutil.rmtree(directory)
        with _publish_dir(directory) as tmp:
            write_manifest(synth, tmp / "manifest.jsonl", tmp / "images")
            _write_json(tmp / "DONE.json", fingerprint)
    return read_manifest(directory / "manifest.jsonl", materialize=True)


def training_set(spec: ExperimentSpec, cfg: RunConfig, data: PreparedData, synthetic: DatasetManifest) -> DatasetManifest:
    n_real, n_gen = spec.counts(cfg)
    covid_parts = [(data.covid_train, n_real)] if n_real else []
    ordered = DatasetManifest(synthetic.records[:n_gen], synthetic.provenance_note)
    covid_parts.append((ordered, n_gen))
    sources = {Label.COVID: covid_parts, Label.NORMAL: [(data.kaggle_classifier_pool, cfg.per_class)]}
    if spec.task is Task.MULTICLASS:
        sources[Label.BACTERIAL] = [(data.kaggle_classifier_pool, cfg.per_class)]
        sources[Label.VIRAL] = [(data.kaggle_classifier_pool, cfg.per_class)]
    return build_training_set(cfg.per_class, sources, test=data.test_ids, seed=cfg.seed)


def classifier_config(spec: ExperimentSpec, cfg: RunConfig) -> ClassifierConfig:
    return ClassifierConfig(arch=spec.classifier, num_classes=spec.task.num_classes, epochs=cfg.classifier_epochs,
                            lr=cfg.classifier_lr, val_fraction=cfg.val_fraction, batch_size=cfg.classifier_batch_size,
                            seed=spec.seed, resolution=cfg.resolution)


def ensure_classifier(spec: ExperimentSpec, cfg: RunConfig, data: PreparedData, train_missing: bool = True
                      ) -> TrainedClassifier:
    directory = cfg.output_dir / "classifiers" / spec.id
    fingerprint = _fingerprint(cfg, _GAN_KEYS + ("classifier_epochs", "classifier_batch_size", "classifier_lr",
                                                  "val_fraction", "per_class", "real_covid"), spec=spec.to_dict())
    if _stage_ready(directory, fingerprint):
        return load_classifier(directory)
    if not train_missing:
        raise PrerequisiteError(f"classifier for {spec.id} missing; run `mttgan train-classifier --experiment {spec.id}`")
    gan_dir = ensure_gan(cfg, data, spec.gan_variant, spec.gan_augmentation, train_missing)
    synthetic = ensure_synthetic(cfg, gan_dir, spec.gan_key)
    train_set = training_set(spec, cfg, data, synthetic)
    clf = train_classifier(train_set, classifier_config(spec, cfg), exclude=data.test_ids)
    if directory.exists():
        shutil.rmtree(directory)
    with _publish_dir(directory) as tmp:
        save_classifier(clf, tmp)
        _write_json(tmp / "training_set.json", {"ids": [r.id for r in train_set],
                                                "counts": {k.value: v for k, v in train_set.counts_by_label.items()}})
        _write_json(tmp / "DONE.json", fingerprint)
    return clf


# --------------------------------------------------------------------------- #
# reports


@dataclass
class ReportBundle:
    spec: ExperimentSpec
    accuracy: float
    ci: BinomialCI
    confusion: ConfusionMatrix
    fisher_vs: list[tuple[str, FisherResult]] = field(default_factory=list)
    sample_grid_path: str | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "experiment": self.spec.to_dict(), "accuracy": self.accuracy, "ci": self.ci.to_dict(),
            "confusion": self.confusion.to_dict(),
            "fisher_vs": [{"other": other, **res.to_dict()} for other, res in self.fisher_vs],
            "sample_grid_path": self.sample_grid_path, "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportBundle":
        e = d["experiment"]
        spec = ExperimentSpec(e["id"], e["task"], e["gan_variant"], e["gan_augmentation"], e["covid_composition"],
                              e["classifier"], e["seed"])
        ci = BinomialCI(**d["ci"])
        cm = ConfusionMatrix(tuple(d["confusion"]["class_order"]), np.array(d["confusion"]["counts"]))
        fisher = [(f["other"], FisherResult(tuple(tuple(r) for r in f["table"]), f["p_two_sided"], f.get("flagged")))
                  for f in d.get("fisher_vs", [])]
        return cls(spec, d["accuracy"], ci, cm, fisher, d.get("sample_grid_path"), list(d.get("notes", [])))


def write_bundle(bundle: ReportBundle, cfg: RunConfig) -> Path:
    return _write_json(cfg.output_dir / "reports" / f"{bundle.spec.id}.json", bundle.to_dict())


def render_image_grid(checkpoint: str | Path, rows: int, cols: int, seed: int, out: str | Path,
                      noise_policy: str = "clipped_gaussian") -> Path:
    """Tile ``rows × cols`` generated images into one 16-bit PNG (no gutters)."""
    name = checkpoint_header(checkpoint)["spec_name"]
    try:
        spec = spec_from_name(name)
    except ValueError as exc:
        raise ShapeError(f"{checkpoint}: not a generator checkpoint ({exc})") from exc
    if not spec.name.startswith("generator"):
        raise ShapeError(f"{checkpoint}: holds {name!r}, not a generator")
    generator = load_weights(checkpoint, spec)
    res = spec.output_shape[0]
    gcfg = GanTrainConfig(noise_policy=noise_policy, seed=seed, resolution=res)
    images = generate_dataset(generator, rows * cols, gcfg, seed=seed, spec=spec)
    grid = np.zeros((rows * res, cols * res), dtype=np.float32)
    for i, rec in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * res:(r + 1) * res, c * res:(c + 1) * res] = rec.pixels
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grayscale(grid, out)
    return out


def run_experiment(spec: ExperimentSpec, cfg: RunConfig, train_missing: bool = True) -> ReportBundle:
    """Train or reuse every stage behind one table cell and write its report bundle."""
    data = prepare_data(cfg)
    test = data.test_set(spec.task)
    clf = ensure_classifier(spec, cfg, data, train_missing)
    cm = evaluate(clf, test)
    acc = accuracy(cm)
    ci = clopper_pearson(cm.correct, cm.total, 0.95)
    gan_dir = ensure_gan(cfg, data, spec.gan_variant, spec.gan_augmentation, train_missing=False)
    grid = cfg.output_dir / "grids" / f"{spec.gan_key}.png"
    if not grid.exists():
        render_image_grid(gan_dir / "generator.safetensors", cfg.grid_rows, cfg.grid_cols, cfg.seed, grid,
                          cfg.noise_policy)
    notes = [n for n in (ci_note(ci),) if n]
    bundle = ReportBundle(spec, acc, ci, cm, [], grid.relative_to(cfg.output_dir).as_posix(), notes)
    write_bundle(bundle, cfg)
    log.info("%s: accuracy %.2f%% CI (%.5f, %.5f)", spec.id, 100 * acc, ci.lower, ci.upper)
    return bundle


def fisher_pairings(bundles: Sequence[ReportBundle]) -> None:
    """Attach Fisher tests of each MTT row against each baseline row (same task and classifier)."""
    cells = {(b.spec.task, b.spec.classifier, row_key(b.spec)): b for b in bundles}
    for b in bundles:
        b.fisher_vs = []
    for (task, arch, key), bundle in cells.items():
        for mtt_key, base_key in FISHER_PAIRS:
            if key != mtt_key:
                continue
            other = cells.get((task, arch, base_key))
            if other is not None:
                bundle.fisher_vs.append((other.spec.id, compare_accuracies(bundle.confusion, other.confusion)))


def emit_table(bundles: Sequence[ReportBundle], out: str | Path) -> Path:
    """Delimited accuracy table (plus a JSON copy beside it) for one task."""
    if not bundles:
        raise ValueError("no report bundles to tabulate")
    tasks = {b.spec.task for b in bundles}
    if len(tasks) > 1:
        raise ValueError(f"bundles mix tasks {sorted(t.value for t in tasks)}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for b in bundles:
        rows.append({
            "experiment": ROW_LABELS.get(row_key(b.spec), b.spec.id), "classifier": b.spec.classifier,
            "accuracy_pct": f"{100 * b.accuracy:.2f}", "ci_lower": f"{b.ci.lower:.5f}", "ci_upper": f"{b.ci.upper:.5f}",
        })
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out.with_suffix(".json"), {"task": tasks.pop().value, "rows": [b.to_dict() for b in bundles]})
    return out


def emit_fisher_table(bundles: Sequence[ReportBundle], out: str | Path) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["experiment", "versus", "table", "p_two_sided"])
        for b in bundles:
            for other, res in b.fisher_vs:
                writer.writerow([b.spec.id, other, json.dumps(res.table), f"{res.p_two_sided:.6g}"])
    return out


def write_reports(bundles: Sequence[ReportBundle], cfg: RunConfig) -> list[Path]:
    fisher_pairings(bundles)
    paths = [write_bundle(b, cfg) for b in bundles]
    reports = cfg.output_dir / "reports"
    for task in Task:
        subset = [b for b in bundles if b.spec.task is task]
        if subset:
            paths.append(emit_table(subset, reports / f"table_{task.value}.csv"))
            paths.append(emit_fisher_table(subset, reports / f"fisher_{task.value}.csv"))
    return paths


def run_matrix(cfg: RunConfig, specs: Sequence[ExperimentSpec] | None = None) -> list[ReportBundle]:
    """Run every requested experiment; failures are logged and listed in ``reports/failures.json``."""
    specs = list(specs) if specs is not None else select_experiments(cfg)
    bundles, failures = [], []
    for spec in specs:
        try:
            bundles.append(run_experiment(spec, cfg))
        except Exception as exc:  # keep going; the matrix reports partial results
            log.exception("experiment %s failed", spec.id)
            failures.append({"experiment": spec.id, "error": f"{type(exc).__name__}: {exc}"})
    if bundles:
        write_reports(bundles, cfg)
    _write_json(cfg.output_dir / "reports" / "failures.json", failures)
    return bundles


def load_bundles(cfg: RunConfig) -> list[ReportBundle]:
    reports = cfg.output_dir / "reports"
    order = {s.id: i for i, s in enumerate(standard_matrix())}
    bundles = []
    for path in sorted(reports.glob("*.json")):
        d = json.loads(path.read_text())
        if isinstance(d, dict) and "experiment" in d:
            bundles.append(ReportBundle.from_dict(d))
    return sorted(bundles, key=lambda b: order.get(b.spec.id, len(order)))
