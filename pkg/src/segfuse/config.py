"""Dataset manifests and pipeline configuration.

Both are JSON documents with fixed schemas.  Paths inside a manifest are
relative to the manifest file; paths inside a config are relative to the
config file, except ``output_dir`` which resolves against the working
directory (the config may live in a read-only install).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .resize import ResizePolicy, TABLE_SAME_WIDTH_SIZES
from .taxonomy import (
    ClassSet,
    fixture_path,
    load_builtin_class_set,
    load_class_set,
    load_relations_file,
)

RELABEL_METHODS = ("standard", "thrifty")


class ConfigError(ValueError):
    """A manifest or pipeline config is malformed."""


@dataclass(frozen=True)
class SampleRecord:
    """One aligned sample; exactly one depth source (depth map or cloud+calib)."""

    rgb: Path
    label: Path
    depth: Path = None
    cloud: Path = None
    calibration: Path = None

    def __post_init__(self):
        has_depth = self.depth is not None
        has_cloud = self.cloud is not None or self.calibration is not None
        if has_depth == has_cloud:
            raise ConfigError(
                f"sample {self.rgb}: need exactly one depth source "
                "(either 'depth' or 'cloud'+'calibration')"
            )
        if has_cloud and (self.cloud is None or self.calibration is None):
            raise ConfigError(f"sample {self.rgb}: cloud samples need both "
                              "'cloud' and 'calibration'")

    @property
    def stem(self) -> str:
        return Path(self.label).stem


@dataclass
class DatasetManifest:
    dataset: str
    split: str
    class_set: ClassSet
    samples: list

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ConfigError(f"manifest split must be 'train' or 'val', got {self.split!r}")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fp:
        doc = json.load(fp)
    for key in ("dataset", "split", "class_set"):
        if key not in doc:
            raise ConfigError(f"{path}: manifest missing {key!r}")
    base = path.parent
    class_set = load_class_set(base / doc["class_set"], doc["dataset"])
    samples = []
    for i, rec in enumerate(doc.get("samples", [])):
        if "rgb" not in rec or "label" not in rec:
            raise ConfigError(f"{path}: sample {i} missing 'rgb' or 'label'")
        resolved = {k: base / rec[k] for k in ("rgb", "label", "depth", "cloud", "calibration")
                    if rec.get(k) is not None}
        for k, p in resolved.items():
            if not Path(p).exists():
                raise ConfigError(f"{path}: sample {i}: {k} file {p} does not exist")
        samples.append(SampleRecord(**resolved))
    return DatasetManifest(doc["dataset"], doc["split"], class_set, samples)


@dataclass
class ToyTrainConfig:
    seed: int = 0
    steps: int = 600
    learning_rate: float = 0.1
    batch_size: int = 4
    variant: str = "fusion_add"
    input_h: int = 32
    input_w: int = 32
    stage_channels: tuple = (8, 16, 32)
    spp_heights: tuple = (4, 2, 1)
    train_samples: int = 16
    val_samples: int = 8
    depth_scale: float = 0.01

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.spp_heights = tuple(self.spp_heights)
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ConfigError("need at least one training and one validation sample")
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")


@dataclass
class PipelineConfig:
    main_dataset: str
    manifests: list
    supplements: list = field(default_factory=list)
    relations: dict = field(default_factory=dict)  # dataset -> RelationDecl
    relabel_method: str = "standard"
    resize_policy: ResizePolicy = field(default_factory=ResizePolicy)
    excluded: list = field(default_factory=list)  # class names or unified ids
    training: ToyTrainConfig = field(default_factory=ToyTrainConfig)
    output_dir: Path = Path("segfuse_out")

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        if self.relabel_method not in RELABEL_METHODS:
            raise ConfigError(
                f"relabel method must be one of {RELABEL_METHODS}, got {self.relabel_method!r}"
            )
        names = {m.dataset for m in self.manifests}
        if self.main_dataset not in names:
            raise ConfigError(f"main dataset {self.main_dataset!r} not in manifest set {sorted(names)}")
        for ds in self.supplements:
            if ds not in names:
                raise ConfigError(f"supplement {ds!r} not in manifest set {sorted(names)}")
            if ds not in self.relations:
                raise ConfigError(f"supplement {ds!r} has no relation declarations")
        if self.main_dataset in self.supplements:
            raise ConfigError("main dataset cannot also be a supplement")

    def class_set_for(self, dataset: str) -> ClassSet:
        sets = [m.class_set for m in self.manifests if m.dataset == dataset]
        if not sets:
            raise ConfigError(f"no manifest for dataset {dataset!r}")
        for other in sets[1:]:
            if other.classes != sets[0].classes:
                raise ConfigError(f"manifests for {dataset!r} disagree on the class set")
        return sets[0]

    def manifests_for(self, dataset: str = None, split: str = None) -> list:
        out = []
        for m in self.manifests:
            if dataset is not None and m.dataset != dataset:
                continue
            if split is not None and m.split != split:
                continue
            out.append(m)
        return out

    def merge_inputs(self):
        """(main ClassSet, ordered [(supplement ClassSet, RelationDecl)])."""
        main = self.class_set_for(self.main_dataset)
        return main, [(self.class_set_for(ds), self.relations[ds]) for ds in self.supplements]


def _parse_resize(doc: dict) -> ResizePolicy:
    kind = doc.get("policy", "original_size")
    overrides = {ds: tuple(hw) for ds, hw in doc.get("overrides", TABLE_SAME_WIDTH_SIZES).items()}
    return ResizePolicy(kind, target_h=int(doc.get("target_h", 0)),
                        target_w=int(doc.get("target_w", 0)), overrides=overrides)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fp:
        doc = json.load(fp)
    base = path.parent
    if "main_dataset" not in doc or "manifests" not in doc:
        raise ConfigError(f"{path}: config needs 'main_dataset' and 'manifests'")
    manifests = [load_manifest(base / m) for m in doc["manifests"]]
    supplements = list(doc.get("supplements", []))
    relations = {}
    if "relations_file" in doc:
        relations = load_relations_file(base / doc["relations_file"])
    elif supplements:
        raise ConfigError(f"{path}: supplements listed but no 'relations_file'")
    training = ToyTrainConfig(**doc.get("training", {}))
    return PipelineConfig(
        main_dataset=doc["main_dataset"],
        manifests=manifests,
        supplements=supplements,
        relations=relations,
        relabel_method=doc.get("relabel_method", "standard"),
        resize_policy=_parse_resize(doc.get("resize", {})),
        excluded=list(doc.get("evaluation_excluded", [])),
        training=training,
        output_dir=Path(doc.get("output_dir", "segfuse_out")),
    )


def default_config(output_dir="segfuse_out") -> PipelineConfig:
    """The shipped four-dataset setup: built-in class sets and relations,
    empty sample lists, and the default toy-training recipe."""
    manifests = [
        DatasetManifest(ds, "train", load_builtin_class_set(ds), [])
        for ds in ("cityscapes", "lostandfound", "kitti", "rellis3d")
    ]
    return PipelineConfig(
        main_dataset="cityscapes",
        manifests=manifests,
        supplements=["lostandfound", "kitti", "rellis3d"],
        relations=load_relations_file(fixture_path("relations.json")),
        relabel_method="standard",
        resize_policy=ResizePolicy("same_width", target_w=2048),
        output_dir=Path(output_dir),
    )
