"""End-to-end orchestration: vocabulary -> autoencoder -> scene -> prompt
filter -> point sampling -> clustering -> count -> eval, with every stage
artifact written under one output directory.

Stage failures raise StageError naming the stage; artifacts written before
the failure stay on disk. With `deterministic=True` no timings are recorded
and reruns produce byte-identical count reports."""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from .autoencoder import (AutoencoderTrainConfig, SemanticTrainConfig,
                          encode, load_autoencoder, save_autoencoder,
                          train_autoencoder)
from .clustering import (DbscanParams, SplitConfig, Template, count_instances,
                         dbscan)
from .ply import (load_cloud_ply, load_ground_truth, load_scene_ply,
                  save_cloud_ply, save_ground_truth, save_scene_ply)
from .pointcloud import SampleConfig, clean_outliers, estimate_normals, \
    sample_points
from .rasterizer import RenderConfig
from .scene import Camera, Scene, SyntheticSceneSpec, generate_orchard
from .semantics import (DEFAULT_TAU_NEG, DEFAULT_TAU_POS, PromptQuery,
                        build_vocabulary, load_vocabulary, mock_embed,
                        query_scene, save_vocabulary, targets_from_scene,
                        optimize_gaussian_features)

GENERATOR_LABELS = ("fruit", "foliage", "branch")


class ValidationError(ValueError):
    """Bad input: missing/malformed files or inconsistent parameters."""


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclasses.dataclass
class EvalResult:
    predicted: int
    ground_truth: int
    recall_pct: float     # 100 * min(pred, gt) / gt, rounded to 0.1
    overcount_pct: float  # 100 * max(pred - gt, 0) / gt, rounded to 0.1
    absolute_error: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def eval_counts(predicted: int, ground_truth: int) -> EvalResult:
    """Counting accuracy versus ground truth."""
    predicted = int(predicted)
    ground_truth = int(ground_truth)
    if ground_truth <= 0:
        raise ValidationError("ground truth count must be positive")
    if predicted < 0:
        raise ValidationError("predicted count must be >= 0")
    recall = round(100.0 * min(predicted, ground_truth) / ground_truth, 1)
    overcount = round(100.0 * max(predicted - ground_truth, 0)
                      / ground_truth, 1)
    return EvalResult(predicted=predicted, ground_truth=ground_truth,
                      recall_pct=recall, overcount_pct=overcount,
                      absolute_error=abs(predicted - ground_truth))


def auto_cameras(scene: Scene, count: int = 3, width: int = 256,
                 height: int = 256) -> list:
    """A ring of cameras framing the scene's bounding box."""
    if len(scene):
        lo = scene.centers.min(axis=0)
        hi = scene.centers.max(axis=0)
        center = (lo + hi) / 2.0
        radius = max(float(np.linalg.norm(hi - lo)) / 2.0, 1e-3)
    else:
        center = np.zeros(3)
        radius = 1.0
    dist = 2.6 * radius
    fx = 0.45 * width * (dist - radius) / radius
    cams = []
    for k in range(count):
        ang = 2.0 * np.pi * k / count
        eye = center + dist * np.array([np.sin(ang), 0.12, np.cos(ang)])
        cams.append(Camera.look_at(eye=eye, target=center, fx=fx,
                                   width=width, height=height))
    return cams


@dataclasses.dataclass
class PipelineConfig:
    """Everything run_pipeline needs; the CLI builds this from flags plus an
    optional config file."""

    out_dir: str
    seed: int = 0
    deterministic: bool = False
    filter_enabled: bool = True
    train_features: bool = False
    scene_path: str | None = None
    gt_path: str | None = None
    vocabulary_path: str | None = None
    autoencoder_path: str | None = None
    positives: list = dataclasses.field(default_factory=lambda: ["fruit"])
    negatives: list = dataclasses.field(default_factory=list)
    tau_pos: float = DEFAULT_TAU_POS
    tau_neg: float = DEFAULT_TAU_NEG
    level: str = "w"
    compare_space: str = "decoded"
    template_spec: str | None = None  # default: sphere:<fruit radius mean>
    clean: bool = True
    clean_k: int = 16
    clean_std_ratio: float = 2.0
    normals: bool = False
    generate: SyntheticSceneSpec = dataclasses.field(
        default_factory=SyntheticSceneSpec)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    ae_train: AutoencoderTrainConfig = dataclasses.field(
        default_factory=AutoencoderTrainConfig)
    train: SemanticTrainConfig = dataclasses.field(
        default_factory=SemanticTrainConfig)
    sample: SampleConfig = dataclasses.field(default_factory=SampleConfig)
    dbscan: DbscanParams = dataclasses.field(default_factory=DbscanParams)
    split: SplitConfig = dataclasses.field(default_factory=SplitConfig)


def _write_json(path: Path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every stage, returning the report dict (also saved as
    report.json)."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"seed": int(config.seed),
              "deterministic": bool(config.deterministic),
              "filter_enabled": bool(config.filter_enabled),
              "stages": []}

    def run_stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        entry = {"name": name}
        if not config.deterministic:
            entry["seconds"] = round(time.perf_counter() - t0, 3)
        report["stages"].append(entry)
        return result

    # Vocabulary: external file or built from the generator labels plus any
    # prompt labels it does not already cover.
    def stage_vocabulary():
        if config.vocabulary_path:
            vocab = load_vocabulary(config.vocabulary_path)
        else:
            labels = list(GENERATOR_LABELS)
            labels += [p for p in list(config.positives)
                       + list(config.negatives) if p not in labels]
            vocab = build_vocabulary(labels)
        save_vocabulary(vocab, out / "vocab.json")
        return vocab

    vocab = run_stage("vocabulary", stage_vocabulary)

    def stage_autoencoder():
        if config.autoencoder_path:
            return load_autoencoder(config.autoencoder_path)
        vectors = np.stack([vocab.entries[k]
                            for k in sorted(vocab.entries)])
        training = train_autoencoder(vectors, config.ae_train,
                                     seed=config.seed)
        save_autoencoder(training.autoencoder, out / "autoencoder.npz")
        return training.autoencoder

    ae = run_stage("autoencoder", stage_autoencoder)

    def stage_scene():
        if config.scene_path:
            scene = load_scene_ply(config.scene_path)
            gt = load_ground_truth(config.gt_path) if config.gt_path \
                else None
            return scene, gt
        label_codes = {}
        for label in GENERATOR_LABELS:
            vec = vocab.vector(label)
            if vec is None:
                raise ValidationError(
                    f"vocabulary is missing generator label '{label}'")
            label_codes[label] = encode(ae, vec)
        scene, gt = generate_orchard(config.generate,
                                     label_codes=label_codes)
        save_scene_ply(scene, out / "scene.ply")
        save_ground_truth(gt, out / "gt.json")
        return scene, gt

    scene, gt = run_stage("scene", stage_scene)

    if config.train_features:
        def stage_train_features():
            cams = auto_cameras(scene, count=3)
            targets = targets_from_scene(scene, cams, config.level,
                                         config.render)
            result = optimize_gaussian_features(scene, cams, targets,
                                                config.train, config.render)
            save_scene_ply(result.scene, out / "scene_refined.ply")
            return result.scene

        scene = run_stage("train_features", stage_train_features)

    def stage_query():
        def prompt_vector(label):
            vec = vocab.vector(label)
            return vec if vec is not None else mock_embed(label, vocab.dim)

        query = PromptQuery(
            positives=[prompt_vector(p) for p in config.positives],
            negatives=[prompt_vector(p) for p in config.negatives],
            tau_pos=config.tau_pos, tau_neg=config.tau_neg,
            level=config.level, compare_space=config.compare_space)
        result = query_scene(scene, ae, query)
        data = result.to_dict()
        data["params"].update({"level": config.level,
                               "compare_space": config.compare_space,
                               "positives": list(config.positives),
                               "negatives": list(config.negatives)})
        _write_json(out / "filter.json", data)
        return result.kept

    if config.filter_enabled:
        kept = run_stage("query", stage_query)
    else:
        kept = np.arange(len(scene), dtype=np.int64)

    def stage_sample():
        cloud = sample_points(scene, kept, config.sample, seed=config.seed)
        if config.clean:
            cloud = clean_outliers(cloud, k=config.clean_k,
                                   std_ratio=config.clean_std_ratio)
        if config.normals:
            normals, _ = estimate_normals(cloud)
            cloud = dataclasses.replace(cloud, normals=normals)
        save_cloud_ply(cloud, out / "cloud.ply")
        return cloud

    cloud = run_stage("sample", stage_sample)

    def stage_count():
        template = Template.parse(
            config.template_spec
            or f"sphere:{config.generate.fruit_radius_mean}")
        eps = config.dbscan.resolved_eps(template)
        params = DbscanParams(eps=eps,
                              min_samples=config.dbscan.min_samples)
        clusters, _ = dbscan(cloud.positions, params)
        result = count_instances(cloud.positions, clusters, template,
                                 config.split, seed=config.seed)
        result.params["eps"] = eps
        result.params["min_samples"] = params.min_samples
        _write_json(out / "count.json", result.to_dict())
        return result

    count = run_stage("count", stage_count)
    report["count_total"] = int(count.total)

    if gt is not None:
        def stage_eval():
            result = eval_counts(count.total, gt.fruit_count)
            _write_json(out / "eval.json", result.to_dict())
            return result

        ev = run_stage("eval", stage_eval)
        report["recall_pct"] = ev.recall_pct
        report["overcount_pct"] = ev.overcount_pct

    _write_json(out / "report.json", report)
    return report
