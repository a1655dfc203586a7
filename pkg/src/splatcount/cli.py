"""Command-line front end.

Subcommands mirror the pipeline stages so each step can run standalone:
generate, render, train-features, query, sample, count, eval, and the
all-in-one pipeline. Settings merge as flag > config file > default, where
the config file holds flat `section.key = value` lines.

Exit codes: 0 success, 2 usage error, 3 invalid input (bad file or
config, missing required seed), 4 stage failure during computation.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .autoencoder import (AutoencoderTrainConfig, SemanticTrainConfig,
                          encode, load_autoencoder)
from .clustering import (DbscanParams, SplitConfig, Template,
                         count_instances, dbscan)
from .config import ConfigError, get_value, load_config
from .images import write_png, write_raw_float
from .pipeline import (GENERATOR_LABELS, PipelineConfig, StageError,
                       ValidationError, auto_cameras, eval_counts,
                       run_pipeline)
from .ply import (load_cloud_ply, load_ground_truth, load_scene_ply,
                  save_cloud_ply, save_ground_truth, save_scene_ply)
from .pointcloud import (SampleConfig, clean_outliers, estimate_normals,
                         sample_points)
from .rasterizer import (RenderConfig, bin_tiles, render_features,
                         render_rgb, schedule_tiles)
from .scene import Camera, SyntheticSceneSpec, generate_orchard
from .semantics import (DEFAULT_TAU_NEG, DEFAULT_TAU_POS, FilterResult,
                        PromptQuery, load_vocabulary, mock_embed,
                        optimize_gaussian_features, query_scene,
                        targets_from_scene)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INVALID = 3
EXIT_STAGE = 4

# Every key a config file may set. Anything else is rejected up front so a
# typo fails loudly instead of silently using the default.
KNOWN_CONFIG_KEYS = frozenset([
    "seed",
    "generate.fruits", "generate.foliage", "generate.trunk_segments",
    "generate.radius_mean", "generate.radius_std", "generate.canopy",
    "generate.contact_pairs",
    "render.tile_size", "render.prune_threshold",
    "render.transmittance_floor", "render.contribution_cap",
    "render.worker_groups", "render.z_near", "render.width",
    "render.height",
    "ae.learning_rate", "ae.iterations", "ae.beta",
    "train.learning_rate", "train.iterations", "train.lambda_sem",
    "train.lambda_reg", "train.beta", "train.loss_kind", "train.views",
    "filter.positives", "filter.negatives", "filter.tau_pos",
    "filter.tau_neg", "filter.level", "filter.compare_space",
    "sample.points", "sample.min_opacity", "sample.truncation",
    "sample.color_quality",
    "clean.enabled", "clean.k", "clean.std_ratio",
    "normals.enabled",
    "count.template", "count.eps", "count.min_samples",
    "count.volume_ratio", "count.hausdorff_tolerance", "count.min_points",
    "count.max_split", "count.downsample",
    "pipeline.filter", "pipeline.train_features", "pipeline.deterministic",
])


@contextlib.contextmanager
def _stage(name: str):
    """Convert unexpected failures in a compute phase into StageError so
    main() can map them to the stage-failure exit code."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def _vec3(text: str) -> np.ndarray:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected three comma-separated numbers, got {text!r}")
    return np.array([float(p) for p in parts], dtype=np.float64)


def _load_cfg(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    cfg = load_config(path)
    unknown = sorted(set(cfg) - KNOWN_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def _require_seed(args, cfg: dict) -> int:
    seed = get_value(args.seed, cfg, "seed", int, None)
    if seed is None:
        raise ValidationError(
            "--seed is required for commands with random stages")
    return int(seed)


def _parse_cap(raw, default):
    """Contribution cap: an int, or 'none' to disable the cap."""
    if raw is None:
        return default
    if isinstance(raw, str) and raw.strip().lower() == "none":
        return None
    return int(raw)


def _generate_spec(args, cfg: dict, seed: int) -> SyntheticSceneSpec:
    base = SyntheticSceneSpec()
    canopy = get_value(args.canopy, cfg, "generate.canopy", list, None)
    if canopy is not None and not isinstance(canopy, np.ndarray):
        canopy = _vec3(",".join(str(c) for c in canopy))
    return SyntheticSceneSpec(
        fruit_count=get_value(args.fruits, cfg, "generate.fruits", int,
                              base.fruit_count),
        fruit_radius_mean=get_value(args.radius_mean, cfg,
                                    "generate.radius_mean", float,
                                    base.fruit_radius_mean),
        fruit_radius_std=get_value(args.radius_std, cfg,
                                   "generate.radius_std", float,
                                   base.fruit_radius_std),
        foliage_gaussians=get_value(args.foliage, cfg, "generate.foliage",
                                    int, base.foliage_gaussians),
        trunk_segments=get_value(getattr(args, "trunk_segments", None), cfg,
                                 "generate.trunk_segments", int,
                                 base.trunk_segments),
        canopy_extent=(tuple(float(c) for c in canopy)
                       if canopy is not None else base.canopy_extent),
        rng_seed=seed,
        contact_pairs=get_value(args.contact_pairs, cfg,
                                "generate.contact_pairs", int,
                                base.contact_pairs))


def _render_config(args, cfg: dict) -> RenderConfig:
    base = RenderConfig()
    cap_raw = get_value(getattr(args, "cap", None), cfg,
                        "render.contribution_cap", str, None)
    return RenderConfig(
        tile_size=get_value(getattr(args, "tile_size", None), cfg,
                            "render.tile_size", int, base.tile_size),
        prune_threshold=get_value(getattr(args, "tau", None), cfg,
                                  "render.prune_threshold", float,
                                  base.prune_threshold),
        transmittance_floor=get_value(None, cfg,
                                      "render.transmittance_floor", float,
                                      base.transmittance_floor),
        contribution_cap=_parse_cap(cap_raw, base.contribution_cap),
        worker_groups=get_value(getattr(args, "groups", None), cfg,
                                "render.worker_groups", int,
                                base.worker_groups),
        z_near=get_value(None, cfg, "render.z_near", float, base.z_near))


def _ae_config(cfg: dict) -> AutoencoderTrainConfig:
    base = AutoencoderTrainConfig()
    return AutoencoderTrainConfig(
        learning_rate=get_value(None, cfg, "ae.learning_rate", float,
                                base.learning_rate),
        iterations=get_value(None, cfg, "ae.iterations", int,
                             base.iterations),
        beta=get_value(None, cfg, "ae.beta", float, base.beta))


def _train_config(args, cfg: dict) -> SemanticTrainConfig:
    base = SemanticTrainConfig()
    return SemanticTrainConfig(
        learning_rate=get_value(getattr(args, "lr", None), cfg,
                                "train.learning_rate", float,
                                base.learning_rate),
        iterations=get_value(getattr(args, "iterations", None), cfg,
                             "train.iterations", int, base.iterations),
        lambda_sem=get_value(None, cfg, "train.lambda_sem", float,
                             base.lambda_sem),
        lambda_reg=get_value(getattr(args, "lambda_reg", None), cfg,
                             "train.lambda_reg", float, base.lambda_reg),
        beta=get_value(getattr(args, "beta", None), cfg, "train.beta",
                       float, base.beta),
        loss_kind=get_value(getattr(args, "loss_kind", None), cfg,
                            "train.loss_kind", str, base.loss_kind))


def _sample_config(args, cfg: dict) -> SampleConfig:
    base = SampleConfig()
    return SampleConfig(
        target_points=get_value(args.points, cfg, "sample.points", int,
                                base.target_points),
        min_opacity=get_value(args.min_opacity, cfg, "sample.min_opacity",
                              float, base.min_opacity),
        truncation=get_value(args.truncation, cfg, "sample.truncation",
                             float, base.truncation),
        color_quality=get_value(args.color_quality, cfg,
                                "sample.color_quality", str,
                                base.color_quality))


def _split_config(args, cfg: dict) -> SplitConfig:
    base = SplitConfig()
    return SplitConfig(
        volume_ratio=get_value(getattr(args, "volume_ratio", None), cfg,
                               "count.volume_ratio", float,
                               base.volume_ratio),
        hausdorff_tolerance=get_value(
            getattr(args, "hausdorff_tol", None), cfg,
            "count.hausdorff_tolerance", float, base.hausdorff_tolerance),
        small_fruit_min_points=get_value(
            getattr(args, "min_points", None), cfg, "count.min_points",
            int, base.small_fruit_min_points),
        max_split=get_value(getattr(args, "max_split", None), cfg,
                            "count.max_split", int, base.max_split),
        downsample_for_hausdorff=get_value(
            getattr(args, "downsample", None), cfg, "count.downsample",
            int, base.downsample_for_hausdorff))


def _label_codes(vocab_path, ae_path):
    """Baked per-label latent codes for the generator, or None for the
    built-in defaults. Both paths must be given together."""
    if bool(vocab_path) != bool(ae_path):
        raise ValidationError(
            "--vocab and --autoencoder must be given together")
    if not vocab_path:
        return None
    vocab = load_vocabulary(vocab_path)
    ae = load_autoencoder(ae_path)
    codes = {}
    for label in GENERATOR_LABELS:
        vec = vocab.vector(label)
        if vec is None:
            raise ValidationError(
                f"vocabulary is missing generator label '{label}'")
        codes[label] = encode(ae, vec)
    return codes


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    seed = _require_seed(args, cfg)
    spec = _generate_spec(args, cfg, seed)
    spec.validate()
    codes = _label_codes(args.vocab, args.autoencoder)
    with _stage("generate"):
        scene, gt = generate_orchard(spec, label_codes=codes)
        save_scene_ply(scene, args.out)
        if args.gt:
            save_ground_truth(gt, args.gt)
    print(f"scene: {args.out} splats={len(scene)} "
          f"fruits={gt.fruit_count}")
    return EXIT_OK


def _camera_from_args(args, scene) -> Camera:
    width = int(args.width)
    height = int(args.height)
    if args.eye is not None or args.target is not None:
        if args.eye is None or args.target is None:
            raise ValidationError("--eye and --target must be given "
                                  "together")
        fx = args.fx if args.fx is not None else 0.9 * width
        return Camera.look_at(eye=args.eye, target=args.target, fx=fx,
                              width=width, height=height)
    return auto_cameras(scene, count=1, width=width, height=height)[0]


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    if not (args.out or args.raw or args.load_report):
        raise ValidationError(
            "nothing to do: give --out, --raw, or --load-report")
    scene = load_scene_ply(args.scene, convention=args.convention)
    config = _render_config(args, cfg).validate()
    camera = _camera_from_args(args, scene)
    with _stage("render"):
        if args.load_report:
            _, report = bin_tiles(scene, camera, config)
            schedule = schedule_tiles(report, config.worker_groups)
            data = {"report": report.to_dict(),
                    "schedule": schedule.to_dict()}
            with open(args.load_report, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, sort_keys=True)
                f.write("\n")
        if args.features:
            fi = render_features(scene, camera, args.features, config,
                                 threads=args.threads)
            img, skipped = fi.features, fi.skipped_singular
            # PNG preview maps feature range [-1, 1] to [0, 1]; the raw
            # dump keeps exact values.
            png = np.clip(0.5 + 0.5 * img, 0.0, 1.0)
        else:
            fb = render_rgb(scene, camera, config, threads=args.threads)
            img, skipped = fb.color, fb.skipped_singular
            png = img
        if args.out:
            write_png(args.out, png)
        if args.raw:
            write_raw_float(args.raw, img)
    print(f"rendered {camera.width}x{camera.height} splats={len(scene)} "
          f"skipped_singular={skipped}")
    return EXIT_OK


def cmd_train_features(args) -> int:
    cfg = _load_cfg(args)
    scene = load_scene_ply(args.scene)
    reference = load_scene_ply(args.reference) if args.reference else scene
    if len(reference) and len(scene) == 0:
        raise ValidationError("cannot fit codes on an empty scene")
    rcfg = _render_config(args, cfg).validate()
    tcfg = _train_config(args, cfg).validate()
    views = get_value(args.views, cfg, "train.views", int, 3)
    width = get_value(args.width, cfg, "render.width", int, 128)
    height = get_value(args.height, cfg, "render.height", int, 128)
    with _stage("train-features"):
        cams = auto_cameras(reference, count=views, width=width,
                            height=height)
        targets = targets_from_scene(reference, cams, args.level, rcfg)
        result = optimize_gaussian_features(scene, cams, targets, tcfg,
                                            rcfg)
        save_scene_ply(result.scene, args.out)
    print(f"final_loss={result.loss_trace[-1]:.6g} "
          f"steps={len(result.loss_trace) - 1} "
          f"unconstrained={int(result.unconstrained.sum())}")
    return EXIT_OK


def _prompt_vectors(labels, vocab):
    """Vocabulary vectors when available, mock embeddings otherwise."""
    out = []
    for label in labels:
        vec = vocab.vector(label) if vocab is not None else None
        out.append(vec if vec is not None else mock_embed(label))
    return out


def cmd_query(args) -> int:
    cfg = _load_cfg(args)
    scene = load_scene_ply(args.scene)
    ae = load_autoencoder(args.autoencoder)
    vocab = load_vocabulary(args.vocab) if args.vocab else None
    positives = get_value(args.pos, cfg, "filter.positives", list,
                          ["fruit"])
    negatives = get_value(args.neg, cfg, "filter.negatives", list, [])
    tau_pos = get_value(args.tau_pos, cfg, "filter.tau_pos", float,
                        DEFAULT_TAU_POS)
    tau_neg = get_value(args.tau_neg, cfg, "filter.tau_neg", float,
                        DEFAULT_TAU_NEG)
    level = get_value(args.level, cfg, "filter.level", str, "w")
    space = get_value(args.compare_space, cfg, "filter.compare_space",
                      str, "decoded")
    if not positives:
        raise ValidationError("at least one positive prompt is required")
    query = PromptQuery(positives=_prompt_vectors(positives, vocab),
                        negatives=_prompt_vectors(negatives, vocab),
                        tau_pos=tau_pos, tau_neg=tau_neg, level=level,
                        compare_space=space)
    query.validate()
    with _stage("query"):
        result = query_scene(scene, ae, query)
        if args.out:
            data = result.to_dict()
            data["params"].update({"level": level, "compare_space": space,
                                   "positives": list(positives),
                                   "negatives": list(negatives)})
            with open(args.out, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, sort_keys=True)
                f.write("\n")
    print(f"kept={len(result.kept)} of {len(scene)} "
          f"tau_pos={result.tau_pos} tau_neg={result.tau_neg}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    seed = _require_seed(args, cfg)
    scene = load_scene_ply(args.infile)
    indices = None
    if args.filter:
        with open(args.filter, "r", encoding="utf-8") as f:
            indices = FilterResult.from_dict(json.load(f)).kept
    config = _sample_config(args, cfg).validate()
    clean = get_value(args.clean, cfg, "clean.enabled", bool, True)
    clean_k = get_value(args.clean_k, cfg, "clean.k", int, 16)
    clean_ratio = get_value(args.clean_std_ratio, cfg, "clean.std_ratio",
                            float, 2.0)
    normals = get_value(args.normals, cfg, "normals.enabled", bool, False)
    with _stage("sample"):
        cloud = sample_points(scene, indices, config, seed=seed)
        if clean:
            cloud = clean_outliers(cloud, k=clean_k,
                                   std_ratio=clean_ratio)
        if normals:
            nrm, _ = estimate_normals(cloud)
            cloud = dataclasses.replace(cloud, normals=nrm)
        save_cloud_ply(cloud, args.out)
    print(f"points={len(cloud)} -> {args.out}")
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = _load_cfg(args)
    seed = _require_seed(args, cfg)
    cloud = load_cloud_ply(args.cloud)
    template_spec = get_value(args.template, cfg, "count.template", str,
                              "sphere:0.06")
    template = Template.parse(template_spec)
    eps_flag = get_value(args.eps, cfg, "count.eps", float, None)
    min_samples = get_value(args.min_samples, cfg, "count.min_samples",
                            int, 20)
    params = DbscanParams(eps=eps_flag, min_samples=min_samples)
    eps = params.resolved_eps(template)
    split = _split_config(args, cfg).validate()
    with _stage("count"):
        clusters, _ = dbscan(cloud.positions,
                             DbscanParams(eps=eps,
                                          min_samples=min_samples))
        result = count_instances(cloud.positions, clusters, template,
                                 split, seed=seed)
        result.params["eps"] = eps
        result.params["min_samples"] = min_samples
        if args.out:
            with open(args.out, "w", encoding="utf-8") as f:
                json.dump(result.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
    print(f"total={result.total} clusters={len(result.clusters)}")
    return EXIT_OK


def _resolve_count(path, flag_value, what: str, key: str) -> int:
    if (path is None) == (flag_value is None):
        raise ValidationError(f"give exactly one of --{what} or "
                              f"--{what}-count")
    if flag_value is not None:
        return int(flag_value)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if key not in data:
        raise ValidationError(f"{path}: missing '{key}'")
    return int(data[key])


def cmd_eval(args) -> int:
    predicted = _resolve_count(args.pred, args.pred_count, "pred", "total")
    truth = _resolve_count(args.gt, args.gt_count, "gt", "fruit_count")
    result = eval_counts(predicted, truth)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(result.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
    print(f"predicted={result.predicted} "
          f"ground_truth={result.ground_truth} "
          f"recall={result.recall_pct} overcount={result.overcount_pct}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    seed = _require_seed(args, cfg)
    filter_enabled = get_value(args.filter, cfg, "pipeline.filter", bool,
                               True)
    positives = get_value(args.pos, cfg, "filter.positives", list,
                          ["fruit"])
    negatives = get_value(args.neg, cfg, "filter.negatives", list, [])
    if filter_enabled and not positives:
        raise ValidationError("at least one positive prompt is required")
    # Validate referenced input files up front so a bad path is an input
    # error, not a stage failure.
    for path in (args.scene, args.gt, args.vocab, args.autoencoder):
        if path and not Path(path).is_file():
            raise ValidationError(f"input file not found: {path}")
    if args.vocab:
        load_vocabulary(args.vocab)
    if args.autoencoder:
        load_autoencoder(args.autoencoder)
    if args.scene:
        load_scene_ply(args.scene)
    if args.gt:
        load_ground_truth(args.gt)

    config = PipelineConfig(
        out_dir=args.out_dir,
        seed=seed,
        deterministic=bool(get_value(args.deterministic, cfg,
                                     "pipeline.deterministic", bool,
                                     False)),
        filter_enabled=filter_enabled,
        train_features=bool(get_value(args.train_features, cfg,
                                      "pipeline.train_features", bool,
                                      False)),
        scene_path=args.scene,
        gt_path=args.gt,
        vocabulary_path=args.vocab,
        autoencoder_path=args.autoencoder,
        positives=list(positives),
        negatives=list(negatives),
        tau_pos=get_value(args.tau_pos, cfg, "filter.tau_pos", float,
                          DEFAULT_TAU_POS),
        tau_neg=get_value(args.tau_neg, cfg, "filter.tau_neg", float,
                          DEFAULT_TAU_NEG),
        level=get_value(args.level, cfg, "filter.level", str, "w"),
        compare_space=get_value(args.compare_space, cfg,
                                "filter.compare_space", str, "decoded"),
        template_spec=get_value(args.template, cfg, "count.template", str,
                                None),
        clean=bool(get_value(args.clean, cfg, "clean.enabled", bool,
                             True)),
        clean_k=get_value(None, cfg, "clean.k", int, 16),
        clean_std_ratio=get_value(None, cfg, "clean.std_ratio", float,
                                  2.0),
        normals=bool(get_value(args.normals, cfg, "normals.enabled", bool,
                               False)),
        generate=_generate_spec(args, cfg, seed).validate(),
        render=_render_config(args, cfg).validate(),
        ae_train=_ae_config(cfg).validate(),
        train=_train_config(args, cfg).validate(),
        sample=_sample_config(args, cfg).validate(),
        dbscan=DbscanParams(
            eps=get_value(args.eps, cfg, "count.eps", float, None),
            min_samples=get_value(args.min_samples, cfg,
                                  "count.min_samples", int, 20)),
        split=_split_config(args, cfg).validate())

    report = run_pipeline(config)
    print(f"count_total={report['count_total']}")
    if "recall_pct" in report:
        print(f"recall={report['recall_pct']} "
              f"overcount={report['overcount_pct']}")
    print(f"report: {Path(args.out_dir) / 'report.json'}")
    return EXIT_OK


def _add_generate_flags(p):
    p.add_argument("--fruits", type=int, help="number of fruits")
    p.add_argument("--foliage", type=int, help="foliage gaussian count")
    p.add_argument("--trunk-segments", dest="trunk_segments", type=int)
    p.add_argument("--radius-mean", dest="radius_mean", type=float,
                   help="mean fruit radius in metres")
    p.add_argument("--radius-std", dest="radius_std", type=float)
    p.add_argument("--canopy", type=_vec3, help="extent as x,y,z")
    p.add_argument("--contact-pairs", dest="contact_pairs", type=int,
                   help="fruit pairs placed nearly touching")


def _add_filter_flags(p):
    p.add_argument("--pos", action="append",
                   help="positive prompt (repeatable; default: fruit)")
    p.add_argument("--neg", action="append",
                   help="negative prompt (repeatable)")
    p.add_argument("--tau-pos", dest="tau_pos", type=float,
                   help=f"positive threshold (default {DEFAULT_TAU_POS})")
    p.add_argument("--tau-neg", dest="tau_neg", type=float,
                   help=f"negative threshold (default {DEFAULT_TAU_NEG})")
    p.add_argument("--level", choices=("s", "p", "w"), default=None,
                   help="semantic level to query (default w)")
    p.add_argument("--compare-space", dest="compare_space",
                   choices=("decoded", "latent"), default=None,
                   help="score prompts in decoded embedding space "
                        "(default) or raw latent space")


def _add_sample_flags(p):
    p.add_argument("--points", type=int, help="target point budget")
    p.add_argument("--min-opacity", dest="min_opacity", type=float)
    p.add_argument("--truncation", type=float,
                   help="per-axis draw truncation in sigmas")
    p.add_argument("--color-quality", dest="color_quality",
                   choices=("ultra", "high", "medium", "low"),
                   default=None)


def _add_count_flags(p):
    p.add_argument("--template",
                   help="'sphere:<radius>' or a point-cloud PLY path")
    p.add_argument("--eps", type=float,
                   help="clustering radius (default 0.6 * template "
                        "radius)")
    p.add_argument("--min-samples", dest="min_samples", type=int)
    p.add_argument("--volume-ratio", dest="volume_ratio", type=float)
    p.add_argument("--hausdorff-tol", dest="hausdorff_tol", type=float)
    p.add_argument("--min-points", dest="min_points", type=int)
    p.add_argument("--max-split", dest="max_split", type=int)
    p.add_argument("--downsample", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatcount",
        description="Prompt-filtered gaussian-splat fruit counting")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="config file")
        p.set_defaults(func=fn)
        return p

    p = add("generate", cmd_generate, "generate a synthetic orchard scene")
    p.add_argument("--out", required=True, help="scene PLY to write")
    p.add_argument("--gt", help="ground-truth JSON to write")
    p.add_argument("--vocab", help="vocabulary JSON for label codes")
    p.add_argument("--autoencoder", help="autoencoder weights (.npz)")
    p.add_argument("--seed", type=int)
    _add_generate_flags(p)

    p = add("render", cmd_render, "render a scene to PNG or raw floats")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", help="PNG path")
    p.add_argument("--raw", help="raw float32 image path")
    p.add_argument("--features", choices=("s", "p", "w"),
                   help="render this semantic level instead of RGB")
    p.add_argument("--eye", type=_vec3, help="camera position x,y,z")
    p.add_argument("--target", type=_vec3, help="look-at point x,y,z")
    p.add_argument("--fx", type=float, help="focal length in pixels")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--height", type=int, default=512)
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--tau", type=float,
                   help="opacity prune threshold (default 1/255)")
    p.add_argument("--cap", help="per-pixel contribution cap or 'none'")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--groups", type=int, help="scheduler worker groups")
    p.add_argument("--load-report", dest="load_report",
                   help="write tile load + schedule JSON here")
    p.add_argument("--convention", choices=("linear", "3dgs"),
                   default="linear")

    p = add("train-features", cmd_train_features,
            "fit per-splat semantic codes to rendered targets")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="refined scene PLY")
    p.add_argument("--reference",
                   help="scene whose rendered codes are the target "
                        "(default: the input scene itself)")
    p.add_argument("--level", choices=("s", "p", "w"), default="w")
    p.add_argument("--views", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--loss-kind", dest="loss_kind",
                   choices=("mixed", "l2"), default=None)

    p = add("query", cmd_query, "filter splats by text prompts")
    p.add_argument("--scene", required=True)
    p.add_argument("--autoencoder", required=True)
    p.add_argument("--vocab", help="vocabulary JSON for prompt lookups")
    p.add_argument("--out", help="filter JSON to write")
    _add_filter_flags(p)

    p = add("sample", cmd_sample, "sample a point cloud from a scene")
    p.add_argument("--in", dest="infile", required=True,
                   help="scene PLY")
    p.add_argument("--filter", help="filter JSON from the query step")
    p.add_argument("--out", required=True, help="cloud PLY to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--clean", action=argparse.BooleanOptionalAction,
                   default=None, help="statistical outlier removal "
                                      "(default on)")
    p.add_argument("--clean-k", dest="clean_k", type=int)
    p.add_argument("--clean-std-ratio", dest="clean_std_ratio",
                   type=float)
    p.add_argument("--normals", action=argparse.BooleanOptionalAction,
                   default=None, help="estimate per-point normals")
    _add_sample_flags(p)

    p = add("count", cmd_count, "cluster a cloud and count instances")
    p.add_argument("--cloud", required=True, help="point-cloud PLY")
    p.add_argument("--out", help="count JSON to write")
    p.add_argument("--seed", type=int)
    _add_count_flags(p)

    p = add("eval", cmd_eval, "compare a count against ground truth")
    p.add_argument("--pred", help="count JSON")
    p.add_argument("--pred-count", dest="pred_count", type=int)
    p.add_argument("--gt", help="ground-truth JSON")
    p.add_argument("--gt-count", dest="gt_count", type=int)
    p.add_argument("--out", help="eval JSON to write")

    p = add("pipeline", cmd_pipeline, "run every stage end to end")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--scene", help="use this scene instead of generating")
    p.add_argument("--gt", help="ground-truth JSON for the eval stage")
    p.add_argument("--vocab", help="external vocabulary JSON")
    p.add_argument("--autoencoder", help="pre-trained weights (.npz)")
    p.add_argument("--filter", action=argparse.BooleanOptionalAction,
                   default=None, help="prompt filtering (default on)")
    p.add_argument("--train-features", dest="train_features",
                   action="store_true", default=None,
                   help="re-fit codes from rendered targets first")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="omit timings so reruns are byte-identical")
    p.add_argument("--clean", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--normals", action=argparse.BooleanOptionalAction,
                   default=None)
    _add_generate_flags(p)
    _add_filter_flags(p)
    _add_sample_flags(p)
    _add_count_flags(p)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code in (None, 0):
            return EXIT_OK
        return EXIT_USAGE
    if getattr(args, "func", None) is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
