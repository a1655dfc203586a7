"""Prompt-driven filtering of a gaussian scene.

Builds a small embedding vocabulary, compresses it with the autoencoder,
generates an orchard whose gaussians carry the compressed codes, and then
asks for "fruit" while rejecting "foliage". Renders the scene before and
after filtering so the effect is visible, and prints the score
distribution around the decision thresholds.

Run:  python3 demos/semantic_query.py --out-dir demos/out/query
"""

import argparse
from pathlib import Path

import numpy as np

from splatcount.autoencoder import encode, train_autoencoder
from splatcount.images import write_png
from splatcount.pipeline import GENERATOR_LABELS, auto_cameras
from splatcount.rasterizer import render_rgb
from splatcount.scene import SyntheticSceneSpec, generate_orchard
from splatcount.semantics import PromptQuery, build_vocabulary, query_scene


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", default="demos/out/query")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--pos", action="append", default=None,
                        help="positive prompt (repeatable)")
    parser.add_argument("--neg", action="append", default=None,
                        help="negative prompt (repeatable)")
    args = parser.parse_args()
    positives = args.pos or ["fruit"]
    negatives = args.neg or ["foliage"]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    labels = list(GENERATOR_LABELS)
    labels += [p for p in positives + negatives if p not in labels]
    vocab = build_vocabulary(labels)
    print(f"vocabulary: {sorted(vocab.entries)} (dim {vocab.dim})")

    vectors = np.stack([vocab.entries[k] for k in sorted(vocab.entries)])
    training = train_autoencoder(vectors, seed=args.seed)
    ae = training.autoencoder
    print(f"autoencoder trained, final loss "
          f"{training.loss_history[-1]:.2e}")

    label_codes = {k: encode(ae, vocab.entries[k])
                   for k in GENERATOR_LABELS}
    spec = SyntheticSceneSpec(fruit_count=60, foliage_gaussians=8000,
                              rng_seed=args.seed)
    scene, gt = generate_orchard(spec, label_codes=label_codes)
    print(f"scene: {len(scene)} gaussians, {gt.fruit_count} fruits")

    query = PromptQuery(
        positives=[vocab.entries[p] for p in positives],
        negatives=[vocab.entries[n] for n in negatives])
    result = query_scene(scene, ae, query)
    kept = result.kept
    print(f"\nprompts +{positives} -{negatives} "
          f"(tau_pos={query.tau_pos}, tau_neg={query.tau_neg})")
    print(f"kept {kept.size} of {len(scene)} gaussians")
    print(f"positive scores: kept median "
          f"{np.median(result.s_pos[kept]):.3f}, "
          f"overall median {np.median(result.s_pos):.3f}")

    cam = auto_cameras(scene, count=1, width=384, height=384)[0]
    write_png(out / "full.png", render_rgb(scene, cam).color)
    write_png(out / "filtered.png",
              render_rgb(scene.subset(kept), cam).color)
    print(f"\nwrote full.png and filtered.png to {out}")


if __name__ == "__main__":
    main()
