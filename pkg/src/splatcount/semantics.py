"""Language side of the pipeline: deterministic mock text embeddings, the
vocabulary JSON format, per-splat semantic code optimization against
rendered feature targets, and prompt-conditioned filtering in 3D.

Scoring decodes each splat's 3-dim code back to embedding space through the
autoencoder and compares against prompt embeddings there; pass
`compare_space="latent"` to compare 3-dim codes directly as an ablation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Sequence

import numpy as np

from .autoencoder import (Autoencoder, SemanticTrainConfig, decode, encode)
from .rasterizer import FeatureImage, RenderConfig, feature_weight_blocks
from .scene import LEVELS, Scene

ZERO_NORM_EPS = 1e-8
DEFAULT_TAU_POS = 0.2255
DEFAULT_TAU_NEG = 0.26125

_MOCK_DOMAIN = "mock-embed-v1"


class SemanticsError(ValueError):
    """Raised for invalid vocabulary files, prompts, or targets."""


def mock_embed(text: str, dim: int = 512) -> np.ndarray:
    """Deterministic stand-in for a text encoder: hash the text, draw a
    Gaussian vector from that seed, normalize. Distinct texts map to
    near-orthogonal directions at dim 512."""
    if not isinstance(text, str) or not text.strip():
        raise SemanticsError("text must be a non-empty string")
    if dim < 1:
        raise SemanticsError("dim must be >= 1")
    digest = hashlib.sha256(f"{_MOCK_DOMAIN}\x00{text}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclasses.dataclass
class EmbeddingVocabulary:
    """Unit-norm embedding per label."""

    dim: int
    entries: dict  # label -> (dim,) unit vector

    def vector(self, label: str) -> np.ndarray | None:
        return self.entries.get(label)


def build_vocabulary(labels: Sequence[str], dim: int = 512
                     ) -> EmbeddingVocabulary:
    """Vocabulary from the mock embedder; one entry per distinct label."""
    entries = {}
    for label in labels:
        entries[label] = mock_embed(label, dim)
    if not entries:
        raise SemanticsError("vocabulary needs at least one label")
    return EmbeddingVocabulary(dim=dim, entries=entries)


def save_vocabulary(vocab: EmbeddingVocabulary, path) -> None:
    data = {"dim": int(vocab.dim),
            "entries": {k: [float(x) for x in v]
                        for k, v in sorted(vocab.entries.items())}}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def load_vocabulary(path) -> EmbeddingVocabulary:
    """Read a vocabulary JSON ({"dim": D, "entries": {label: [floats]}}).

    Vectors are re-normalized on load; ragged or non-finite vectors raise
    SemanticsError naming the label.
    """
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict) or "dim" not in data \
            or "entries" not in data:
        raise SemanticsError(f"{path}: vocabulary must have 'dim' and "
                             f"'entries'")
    dim = data["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise SemanticsError(f"{path}: 'dim' must be a positive integer")
    entries = data["entries"]
    if not isinstance(entries, dict) or not entries:
        raise SemanticsError(f"{path}: 'entries' must be a non-empty object")
    out = {}
    for label, vec in entries.items():
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (dim,):
            raise SemanticsError(
                f"{path}: entry '{label}' has {arr.size} values, expected "
                f"{dim}")
        if not np.all(np.isfinite(arr)):
            raise SemanticsError(f"{path}: entry '{label}' contains "
                                 f"non-finite values")
        norm = np.linalg.norm(arr)
        if norm < ZERO_NORM_EPS:
            raise SemanticsError(f"{path}: entry '{label}' has zero norm")
        out[label] = arr / norm
    return EmbeddingVocabulary(dim=dim, entries=out)


@dataclasses.dataclass
class TargetImage:
    """Supervision for one view: per-pixel feature targets plus a validity
    mask (pixels outside the mask are ignored)."""

    features: np.ndarray  # (H, W, C)
    mask: np.ndarray      # (H, W) bool


@dataclasses.dataclass
class FeatureTargets:
    """Per-view targets for one semantic level."""

    level: str
    images: list  # list[TargetImage], parallel to the camera list


def targets_from_scene(scene: Scene, cameras, level: str,
                       config: RenderConfig | None = None) -> FeatureTargets:
    """Self-supervision targets: render the scene's own codes per view and
    mask to pixels any splat actually covers."""
    from .rasterizer import render_features

    images = []
    for cam in cameras:
        fi = render_features(scene, cam, level, config)
        images.append(TargetImage(features=fi.features,
                                  mask=fi.weight_sum > ZERO_NORM_EPS))
    return FeatureTargets(level=level, images=images)


def _pixel_loss_and_grad(f: np.ndarray, h: np.ndarray, beta: float,
                         kind: str):
    """Loss and dLoss/dF for masked pixel rows f against targets h.

    Mixed loss: beta * mean|f - h| + (1 - beta) * (1 - cos); the cosine
    term is skipped for rows where either side has norm < 1e-8. The L2
    variant is mean (f - h)^2.
    """
    d = f.shape[1]
    if kind == "l2":
        diff = f - h
        loss = np.mean(diff * diff, axis=1)
        return loss, (2.0 / d) * diff
    l1 = np.mean(np.abs(f - h), axis=1)
    grad = (beta / d) * np.sign(f - h)
    nf = np.linalg.norm(f, axis=1, keepdims=True)
    nh = np.linalg.norm(h, axis=1, keepdims=True)
    ok = ((nf >= ZERO_NORM_EPS) & (nh >= ZERO_NORM_EPS))[:, 0]
    loss = beta * l1
    if np.any(ok):
        fs = f[ok]
        hs = h[ok]
        nfs = nf[ok]
        nhs = nh[ok]
        cos = np.sum(fs * hs, axis=1, keepdims=True) / (nfs * nhs)
        loss[ok] += (1.0 - beta) * (1.0 - cos[:, 0])
        dcos = hs / (nfs * nhs) - cos * fs / (nfs * nfs)
        grad[ok] -= (1.0 - beta) * dcos
    return loss, grad


def semantic_loss(rendered, target: TargetImage, beta: float = 0.5,
                  kind: str = "mixed") -> float:
    """Mean per-pixel feature loss over the target mask for one view."""
    feats = rendered.features if isinstance(rendered, FeatureImage) \
        else np.asarray(rendered, dtype=np.float64)
    if feats.shape[:2] != target.mask.shape \
            or feats.shape != target.features.shape:
        raise SemanticsError(
            f"rendered features {feats.shape} do not match targets "
            f"{target.features.shape}")
    sel = target.mask.astype(bool)
    if not np.any(sel):
        raise SemanticsError("target mask has no valid pixels")
    loss, _ = _pixel_loss_and_grad(feats[sel], target.features[sel], beta,
                                   kind)
    return float(np.mean(loss))


class _FeatureProblem:
    """Static geometry (compositing weights) for code optimization over a
    set of views; only the codes change between iterations."""

    def __init__(self, scene: Scene, cameras, targets: FeatureTargets,
                 config: SemanticTrainConfig,
                 render_config: RenderConfig | None = None):
        if len(cameras) != len(targets.images):
            raise SemanticsError(
                f"{len(cameras)} cameras but {len(targets.images)} target "
                f"images")
        self.config = config
        self.n = len(scene)
        self.views = []
        totals = np.zeros(self.n)
        self.pixel_count = 0
        for cam, tgt in zip(cameras, targets.images):
            if tgt.features.shape[:2] != (cam.height, cam.width):
                raise SemanticsError(
                    f"target image {tgt.features.shape} does not match "
                    f"camera {cam.height}x{cam.width}")
            blocks, view_totals = feature_weight_blocks(scene, cam,
                                                        render_config)
            totals += view_totals
            sel = tgt.mask.astype(bool)
            self.pixel_count += int(np.count_nonzero(sel))
            self.views.append((blocks, tgt, sel, cam))
        if self.pixel_count == 0:
            raise SemanticsError("no valid target pixels in any view")
        self.totals = totals
        self.unconstrained = np.where(totals <= 0.0)[0]
        self.constrained = totals > 0.0

    def loss_and_grad(self, codes: np.ndarray):
        cfg = self.config
        total_loss = 0.0
        grad = np.zeros_like(codes)
        for blocks, tgt, sel, cam in self.views:
            img = np.zeros((cam.height, cam.width, codes.shape[1]))
            for blk in blocks:
                f = blk.weights @ codes[blk.indices]
                img[blk.y0:blk.y1, blk.x0:blk.x1] = f.reshape(
                    blk.y1 - blk.y0, blk.x1 - blk.x0, -1)
            loss_rows, grad_rows = _pixel_loss_and_grad(
                img[sel], tgt.features[sel], cfg.beta, cfg.loss_kind)
            total_loss += float(np.sum(loss_rows))
            gimg = np.zeros_like(img)
            gimg[sel] = grad_rows
            for blk in blocks:
                gblk = gimg[blk.y0:blk.y1, blk.x0:blk.x1].reshape(
                    -1, codes.shape[1])
                np.add.at(grad, blk.indices, blk.weights.T @ gblk)
        scale = cfg.lambda_sem / self.pixel_count
        total_loss *= scale
        grad *= scale
        # L2 code penalty, constrained splats only.
        total_loss += cfg.lambda_reg * float(
            np.sum(codes[self.constrained] ** 2))
        grad[self.constrained] += 2.0 * cfg.lambda_reg \
            * codes[self.constrained]
        grad[self.unconstrained] = 0.0
        return total_loss, grad


def feature_loss_and_grad(scene: Scene, cameras, targets: FeatureTargets,
                          config: SemanticTrainConfig | None = None,
                          codes: np.ndarray | None = None,
                          render_config: RenderConfig | None = None):
    """Objective value and analytic code gradient at `codes` (defaults to
    the scene's current codes for the targets' level). The gradient of the
    compositing step is exact: features are linear in the codes with the
    compositing weights as coefficients."""
    config = (config or SemanticTrainConfig()).validate()
    problem = _FeatureProblem(scene, cameras, targets, config, render_config)
    if codes is None:
        codes = scene.level_codes(targets.level).copy()
    return problem.loss_and_grad(np.asarray(codes, dtype=np.float64))


@dataclasses.dataclass
class OptimizeResult:
    """Outcome of code optimization."""

    scene: Scene
    loss_trace: np.ndarray      # (iterations + 1,) monotone non-increasing
    unconstrained: np.ndarray   # splat ids with zero total weight, untouched


_BACKTRACK_LIMIT = 60


def optimize_gaussian_features(scene: Scene, cameras,
                               targets: FeatureTargets,
                               config: SemanticTrainConfig | None = None,
                               render_config: RenderConfig | None = None
                               ) -> OptimizeResult:
    """Fit one level's codes to rendered feature targets.

    Gradient descent with backtracking step halving; the recorded loss
    trace never increases. Splats that no masked pixel sees keep their
    initial codes and are reported in `unconstrained`. Fully deterministic.
    """
    config = (config or SemanticTrainConfig()).validate()
    if targets.level not in LEVELS:
        raise SemanticsError(f"unknown semantic level '{targets.level}'")
    problem = _FeatureProblem(scene, cameras, targets, config, render_config)
    codes = scene.level_codes(targets.level).copy()
    loss, grad = problem.loss_and_grad(codes)
    trace = [loss]
    for _ in range(config.iterations):
        step = config.learning_rate
        accepted = False
        for _ in range(_BACKTRACK_LIMIT):
            cand = codes - step * grad
            cand[problem.unconstrained] = codes[problem.unconstrained]
            cand_loss, cand_grad = problem.loss_and_grad(cand)
            if cand_loss <= loss:
                codes, loss, grad = cand, cand_loss, cand_grad
                accepted = True
                break
            step *= 0.5
        trace.append(loss)
        if not accepted:
            break  # no descent direction at float resolution; stop early
    return OptimizeResult(scene=scene.with_codes(targets.level, codes),
                          loss_trace=np.asarray(trace),
                          unconstrained=problem.unconstrained)


@dataclasses.dataclass
class PromptQuery:
    """Positive/negative prompt embeddings plus the dual thresholds."""

    positives: list
    negatives: list = dataclasses.field(default_factory=list)
    tau_pos: float = DEFAULT_TAU_POS
    tau_neg: float = DEFAULT_TAU_NEG
    level: str = "w"
    compare_space: str = "decoded"

    def validate(self):
        if not self.positives:
            raise SemanticsError("query needs at least one positive prompt")
        for name, tau in (("tau_pos", self.tau_pos),
                          ("tau_neg", self.tau_neg)):
            if not (-1.0 <= tau <= 1.0):
                raise SemanticsError(f"{name} must lie in [-1, 1]")
        if self.level not in LEVELS:
            raise SemanticsError(f"unknown semantic level '{self.level}'")
        if self.compare_space not in ("decoded", "latent"):
            raise SemanticsError(
                f"compare_space must be 'decoded' or 'latent', got "
                f"'{self.compare_space}'")
        return self


def _unit_rows(rows, what):
    arr = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        raise SemanticsError(f"{what} contains a zero-norm vector")
    return arr / norms[:, None]


def score_prompts(scene: Scene, ae: Autoencoder, query: PromptQuery
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-splat prompt scores.

    Returns (s_pos, s_neg, degenerate): s_pos is the max cosine against the
    positive prompts, s_neg against the negatives (-1 when there are none).
    Splats whose compared vector has norm < 1e-8 are flagged degenerate and
    scored (-1, -1), which the positive gate always rejects.
    """
    query.validate()
    pos = np.stack([np.asarray(p, dtype=np.float64)
                    for p in query.positives])
    neg = np.stack([np.asarray(p, dtype=np.float64)
                    for p in query.negatives]) if query.negatives else None
    codes = scene.level_codes(query.level)
    if query.compare_space == "decoded":
        compared = decode(ae, codes) if len(scene) else np.zeros((0, ae.dim))
    else:
        compared = codes.copy()
        pos = encode(ae, pos)
        neg = encode(ae, neg) if neg is not None else None
    pos = _unit_rows(pos, "positive prompts")
    if neg is not None:
        neg = _unit_rows(neg, "negative prompts")

    norms = np.linalg.norm(compared, axis=1)
    degenerate = norms < ZERO_NORM_EPS
    safe = np.where(degenerate, 1.0, norms)
    unit = compared / safe[:, None]
    s_pos = (unit @ pos.T).max(axis=1) if len(scene) \
        else np.zeros(0)
    if neg is not None and len(scene):
        s_neg = (unit @ neg.T).max(axis=1)
    else:
        s_neg = np.full(len(scene), -1.0)
    s_pos = np.where(degenerate, -1.0, s_pos)
    s_neg = np.where(degenerate, -1.0, s_neg)
    return s_pos, s_neg, degenerate


@dataclasses.dataclass
class FilterResult:
    """Splats passing the dual-threshold prompt gate."""

    kept: np.ndarray   # sorted splat ids
    s_pos: np.ndarray  # (n,)
    s_neg: np.ndarray  # (n,)
    tau_pos: float
    tau_neg: float

    def to_dict(self) -> dict:
        return {"kept": [int(i) for i in self.kept],
                "s_pos": [float(v) for v in self.s_pos],
                "s_neg": [float(v) for v in self.s_neg],
                "params": {"tau_pos": float(self.tau_pos),
                           "tau_neg": float(self.tau_neg)}}

    @staticmethod
    def from_dict(data: dict) -> "FilterResult":
        return FilterResult(
            kept=np.asarray(data["kept"], dtype=np.int64),
            s_pos=np.asarray(data["s_pos"], dtype=np.float64),
            s_neg=np.asarray(data["s_neg"], dtype=np.float64),
            tau_pos=float(data["params"]["tau_pos"]),
            tau_neg=float(data["params"]["tau_neg"]))


def filter_gaussians(s_pos, s_neg, tau_pos: float = DEFAULT_TAU_POS,
                     tau_neg: float = DEFAULT_TAU_NEG) -> FilterResult:
    """Keep splats with s_pos strictly above tau_pos and s_neg strictly
    below tau_neg; boundary values are excluded on both gates."""
    s_pos = np.asarray(s_pos, dtype=np.float64)
    s_neg = np.asarray(s_neg, dtype=np.float64)
    if s_pos.shape != s_neg.shape or s_pos.ndim != 1:
        raise SemanticsError("score arrays must be 1-D and equally sized")
    kept = np.where((s_pos > tau_pos) & (s_neg < tau_neg))[0]
    return FilterResult(kept=kept, s_pos=s_pos, s_neg=s_neg,
                        tau_pos=float(tau_pos), tau_neg=float(tau_neg))


def query_scene(scene: Scene, ae: Autoencoder, query: PromptQuery
                ) -> FilterResult:
    """score_prompts + filter_gaussians in one step."""
    s_pos, s_neg, _ = score_prompts(scene, ae, query)
    return filter_gaussians(s_pos, s_neg, query.tau_pos, query.tau_neg)
