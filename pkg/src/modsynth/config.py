"""Pipeline configuration: an INI file of sections mirroring the run stages.

Every key has a default; a minimal config only needs [paths] and [subjects].
Unknown sections or keys raise instead of being silently ignored, so typos
surface immediately.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .ensemble import KIND_BDT, KIND_RF, BoostedTreesParams, RandomForestParams
from .errors import ConfigError
from .features import KIND_MULTISCALE, KIND_PATCH, FeatureSpec
from .registration import CostKind, DeformableOptions, RegistrationOptions
from .volume import PreprocessParams

_KNOWN_SECTIONS = {
    "paths", "subjects", "landmarks", "preprocess", "features", "training",
    "random_forest", "boosted_trees", "registration", "evaluation", "phantom",
}


@dataclass
class PhantomConfig:
    seed: int = 0
    n_pairs: int = 7
    gammas: tuple[float, ...] = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)
    warp_magnitude_um: float = 6.0
    noise_sigma: float = 5.0
    n_landmarks: int = 30
    n_blobs: int = 25


@dataclass
class PipelineConfig:
    output_dir: str
    template_path: str
    subject_paths: dict[str, str]
    landmark_paths: dict[str, str] = field(default_factory=dict)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    feature_spec: FeatureSpec = field(default_factory=FeatureSpec)
    learner: str = KIND_RF
    n_samples: int = 200000
    training_subjects: tuple[str, ...] = ()
    seed: int = 0
    foreground_threshold: float = 1.0
    rf_params: RandomForestParams = field(default_factory=RandomForestParams)
    bdt_params: BoostedTreesParams = field(default_factory=BoostedTreesParams)
    cost: CostKind = field(default_factory=CostKind)
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)
    threshold_um: float = 5.0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def __post_init__(self):
        if not self.training_subjects:
            self.training_subjects = tuple(sorted(self.subject_paths)[:2])
        unknown = [s for s in self.training_subjects if s not in self.subject_paths]
        if unknown:
            raise ConfigError(f"training subjects not in [subjects]: {unknown}")

    @property
    def subject_ids(self) -> list[str]:
        return sorted(self.subject_paths)


class _SectionReader:
    def __init__(self, parser: configparser.ConfigParser, name: str, path: str):
        self.name = name
        self.path = path
        self.raw = dict(parser[name]) if parser.has_section(name) else {}
        self.seen: set[str] = set()

    def get(self, key: str, default=None):
        self.seen.add(key)
        return self.raw.get(key, default)

    def get_typed(self, key: str, cast, default):
        value = self.get(key)
        if value is None or value == "":
            return default
        try:
            return cast(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(
                f"{self.path}: [{self.name}] {key} = {value!r}: {e}"
            ) from e

    def finish(self):
        extra = set(self.raw) - self.seen
        if extra:
            raise ConfigError(
                f"{self.path}: unknown keys in [{self.name}]: {sorted(extra)}"
            )


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def load_config(path: str) -> PipelineConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e

    unknown = set(parser.sections()) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")

    paths = _SectionReader(parser, "paths", path)
    output_dir = paths.get("output_dir", "out")
    template_path = paths.get("template", "")
    paths.finish()

    subject_paths = dict(parser["subjects"]) if parser.has_section("subjects") else {}
    landmark_paths = dict(parser["landmarks"]) if parser.has_section("landmarks") else {}

    pp = _SectionReader(parser, "preprocess", path)
    preprocess = PreprocessParams(
        clip_percentile=pp.get_typed("clip_percentile", float, 99.0),
        smooth_sigma_um=pp.get_typed("smooth_sigma_um", _floats, (1.5, 1.5, 1.5)),
        out_range=pp.get_typed("out_range", _floats, (0.0, 255.0)),
    )
    pp.finish()

    ft = _SectionReader(parser, "features", path)
    kind = ft.get("kind", KIND_PATCH)
    if kind not in (KIND_PATCH, KIND_MULTISCALE):
        raise ConfigError(f"{path}: unknown feature kind {kind!r}")
    feature_spec = FeatureSpec(
        kind=kind,
        patch_dims=ft.get_typed("patch_dims", _ints, (5, 5, 3)),
        scales_um=ft.get_typed("scales_um", _floats, (1.0, 2.0, 4.0)),
    )
    ft.finish()

    tr = _SectionReader(parser, "training", path)
    learner = tr.get("learner", KIND_RF)
    if learner not in (KIND_RF, KIND_BDT):
        raise ConfigError(f"{path}: unknown learner {learner!r}")
    n_samples = tr.get_typed("n_samples", int, 200000)
    training_subjects = tuple(
        tr.get_typed("training_subjects", str, "").split()
    )
    seed = tr.get_typed("seed", int, 0)
    foreground_threshold = tr.get_typed("foreground_threshold", float, 1.0)
    tr.finish()

    rf = _SectionReader(parser, "random_forest", path)
    fps_raw = rf.get("features_per_split")
    depth_raw = rf.get("max_depth")
    rf_params = RandomForestParams(
        n_trees=rf.get_typed("n_trees", int, 1000),
        subsample_fraction=rf.get_typed("subsample_fraction", float, 0.1),
        features_per_split=int(fps_raw) if fps_raw else None,
        max_depth=int(depth_raw) if depth_raw else None,
        seed=seed,
    )
    rf.finish()

    bt = _SectionReader(parser, "boosted_trees", path)
    bdt_params = BoostedTreesParams(
        n_iterations=bt.get_typed("n_iterations", int, 10000),
        shrinkage=bt.get_typed("shrinkage", float, 0.01),
        subsample_fraction=bt.get_typed("subsample_fraction", float, 0.2),
        max_depth=bt.get_typed("max_depth", int, 3),
        seed=seed,
    )
    bt.finish()

    rg = _SectionReader(parser, "registration", path)
    cost = CostKind(
        kind=rg.get("cost", "ssd"),
        mi_bins=rg.get_typed("mi_bins", int, 32),
    )
    deformable = DeformableOptions(
        enabled=rg.get_typed("deformable", _bool, False),
        control_spacing_um=rg.get_typed(
            "control_spacing_um", _floats, (16.0, 16.0, 16.0)
        ),
        bending_weight=rg.get_typed("bending_weight", float, 0.01),
    )
    registration = RegistrationOptions(
        levels=rg.get_typed("levels", int, 3),
        max_iters_per_level=rg.get_typed("max_iters_per_level", int, 200),
        step_init=rg.get_typed("step_init", float, 0.25),
        step_shrink=rg.get_typed("step_shrink", float, 0.5),
        step_growth=rg.get_typed("step_growth", float, 1.25),
        converge_tol=rg.get_typed("converge_tol", float, 1e-7),
        fd_eps=rg.get_typed("fd_eps", float, 1e-3),
        translation_scale_um=rg.get_typed("translation_scale_um", float, None),
        deformable=deformable,
    )
    rg.finish()

    ev = _SectionReader(parser, "evaluation", path)
    threshold_um = ev.get_typed("threshold_um", float, 5.0)
    ev.finish()

    ph = _SectionReader(parser, "phantom", path)
    phantom = PhantomConfig(
        seed=ph.get_typed("seed", int, seed),
        n_pairs=ph.get_typed("n_pairs", int, 7),
        gammas=ph.get_typed("gammas", _floats, (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)),
        warp_magnitude_um=ph.get_typed("warp_magnitude_um", float, 6.0),
        noise_sigma=ph.get_typed("noise_sigma", float, 5.0),
        n_landmarks=ph.get_typed("n_landmarks", int, 30),
        n_blobs=ph.get_typed("n_blobs", int, 25),
    )
    ph.finish()

    return PipelineConfig(
        output_dir=output_dir,
        template_path=template_path,
        subject_paths=subject_paths,
        landmark_paths=landmark_paths,
        preprocess=preprocess,
        feature_spec=feature_spec,
        learner=learner,
        n_samples=n_samples,
        training_subjects=training_subjects,
        seed=seed,
        foreground_threshold=foreground_threshold,
        rf_params=rf_params,
        bdt_params=bdt_params,
        cost=cost,
        registration=registration,
        threshold_um=threshold_um,
        phantom=phantom,
    )
