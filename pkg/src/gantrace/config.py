"""Experiment configuration: INI-style files, derived objects, fingerprints.

Every hyperparameter of the experiment protocol has a key.  The trace
fingerprint covers exactly the inputs that determine a training run
(dataset, architecture, training settings), so traces stay reusable across
evaluation-side changes while mismatched trace/config pairs are refused.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .datasets import (
    dataset_checksum,
    load_idx_images,
    make_digit_images,
    sample_normal2d,
)
from .metrics import ClassifierSettings, MetricSpec
from .models import FcGan, GanArchitecture
from .training import TrainingSettings


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "normal2d"
    n_train: int = 1000
    n_classes: int = 4
    noise: float = 0.15
    images_path: str = ""
    labels_path: str = ""
    side: int = 8

    def __post_init__(self):
        if self.kind not in ("normal2d", "digits8", "idx"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n_train < 1:
            raise ValueError("n_train must be positive")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec
    architecture: GanArchitecture
    training: TrainingSettings
    metrics: tuple[str, ...] = ("all",)
    bandwidth: float = 1.0
    n_reference: int = 1000
    n_test: int = 1000
    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    classifier_seed: int = 0
    k_epochs: tuple[int, ...] = (1,)
    n_targets: int = 50
    n_permutations: int = 1000
    n_harmful: tuple[int, ...] = (50, 100, 250)
    methods: tuple[str, ...] = ("influence", "disc_loss", "random")
    n_seeds: int = 5
    output_dir: str = "runs"

    def __post_init__(self):
        if any(k < 1 or k > self.training.epochs for k in self.k_epochs):
            raise ValueError("every k must satisfy 1 <= k <= epochs")
        if any(n >= self.dataset.n_train for n in self.n_harmful):
            raise ValueError("n_harmful entries must be smaller than the dataset")
        if self.n_targets < 2:
            raise ValueError("need at least two targets")

    def metric_specs(self) -> list[MetricSpec]:
        return [MetricSpec(kind, bandwidth=self.bandwidth) for kind in self.metrics]

    def problem(self) -> FcGan:
        return FcGan(self.architecture)


def synthesize_dataset(spec: DatasetSpec, rng: np.random.Generator
                       ) -> tuple[np.ndarray, np.ndarray | None]:
    if spec.kind == "normal2d":
        return sample_normal2d(spec.n_train, rng), None
    if spec.kind == "digits8":
        return make_digit_images(spec.n_train, spec.n_classes, spec.noise, rng)
    data, labels = load_idx_images(spec.images_path, spec.labels_path or None, spec.side)
    if len(data) < spec.n_train:
        raise ValueError(f"IDX file holds {len(data)} images, need {spec.n_train}")
    return data[:spec.n_train], None if labels is None else labels[:spec.n_train]


def trace_fingerprint(config: ExperimentConfig, data_checksum: str) -> str:
    """Hash of everything that determines the training run."""
    payload = {
        "dataset": {
            "kind": config.dataset.kind,
            "n_train": config.dataset.n_train,
            "n_classes": config.dataset.n_classes,
            "noise": config.dataset.noise,
            "side": config.dataset.side,
            "checksum": data_checksum,
        },
        "architecture": {
            "latent_dim": config.architecture.latent_dim,
            "data_dim": config.architecture.data_dim,
            "hidden_gen": config.architecture.hidden_gen,
            "hidden_disc": config.architecture.hidden_disc,
            "l2_rate": config.architecture.l2_rate,
            "objective": config.architecture.objective,
        },
        "training": {
            "epochs": config.training.epochs,
            "batch_size": config.training.batch_size,
            "lr_gen": config.training.lr_gen,
            "lr_disc": config.training.lr_disc,
            "mode": config.training.mode,
            "first_update": config.training.first_update,
            "seed": config.training.seed,
        },
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _split_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


def _split_names(text: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a sectioned key-value config file.

    ``overrides`` maps dotted ``section.key`` names to replacement string
    values (command-line flags land here).
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))

    ds = parser["dataset"] if parser.has_section("dataset") else {}
    dataset = DatasetSpec(
        kind=ds.get("kind", "normal2d"),
        n_train=int(ds.get("n_train", 1000)),
        n_classes=int(ds.get("n_classes", 4)),
        noise=float(ds.get("noise", 0.15)),
        images_path=ds.get("images", ""),
        labels_path=ds.get("labels", ""),
        side=int(ds.get("side", 8)),
    )
    ar = parser["architecture"] if parser.has_section("architecture") else {}
    data_dim = 2 if dataset.kind == "normal2d" else dataset.side * dataset.side
    architecture = GanArchitecture(
        latent_dim=int(ar.get("latent_dim", 10)),
        data_dim=int(ar.get("data_dim", data_dim)),
        hidden_gen=int(ar.get("hidden_gen", 32)),
        hidden_disc=int(ar.get("hidden_disc", 64)),
        l2_rate=float(ar.get("l2_rate", 1e-3)),
        objective=ar.get("objective", "nonsaturating"),
    )
    tr = parser["training"] if parser.has_section("training") else {}
    training = TrainingSettings(
        epochs=int(tr.get("epochs", 5)),
        batch_size=int(tr.get("batch_size", 100)),
        lr_gen=float(tr.get("lr_gen", 1e-3)),
        lr_disc=float(tr.get("lr_disc", 1e-3)),
        mode=tr.get("mode", "simultaneous"),
        first_update=tr.get("first_update", "generator"),
        seed=int(tr.get("seed", 0)),
    )
    ev = parser["evaluation"] if parser.has_section("evaluation") else {}
    classifier = ClassifierSettings(
        hidden=_split_ints(ev.get("classifier_hidden", "64,32")) or (64, 32),
        epochs=int(ev.get("classifier_epochs", 30)),
        batch_size=int(ev.get("classifier_batch", 32)),
        lr=float(ev.get("classifier_lr", 0.05)),
        feature_layer=int(ev.get("feature_layer", 1)),
        activation=ev.get("classifier_activation", "tanh"),
    )
    infl = parser["influence"] if parser.has_section("influence") else {}
    cl = parser["cleansing"] if parser.has_section("cleansing") else {}
    out = parser["output"] if parser.has_section("output") else {}
    return ExperimentConfig(
        dataset=dataset,
        architecture=architecture,
        training=training,
        metrics=_split_names(ev.get("metrics", "all")),
        bandwidth=float(ev.get("bandwidth", 1.0)),
        n_reference=int(ev.get("n_reference", 1000)),
        n_test=int(ev.get("n_test", 1000)),
        classifier=classifier,
        classifier_seed=int(ev.get("classifier_seed", 0)),
        k_epochs=_split_ints(infl.get("k_epochs", "1")) or (1,),
        n_targets=int(infl.get("n_targets", 50)),
        n_permutations=int(infl.get("n_permutations", 1000)),
        n_harmful=_split_ints(cl.get("n_harmful", "50,100,250")) or (50,),
        methods=_split_names(cl.get("methods", "influence,disc_loss,random")),
        n_seeds=int(cl.get("n_seeds", 5)),
        output_dir=out.get("directory", "runs"),
    )
