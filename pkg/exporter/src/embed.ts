import { createHash } from "node:crypto";

export const EMBED_DIM = 512;

export type Backend = "clip" | "hash";

export const DEFAULT_MODEL = "Xenova/clip-vit-base-patch16";

export class EmbedError extends Error {}

function l2Normalize(v: Float64Array): Float64Array {
  let sq = 0;
  for (const x of v) sq += x * x;
  const norm = Math.sqrt(sq);
  if (!(norm > 0)) throw new EmbedError("embedding has zero norm");
  const out = new Float64Array(v.length);
  for (let i = 0; i < v.length; i++) out[i] = v[i] / norm;
  return out;
}

/** Deterministic unit vector for one token: SHA-256 expanded block by
 * block into centered uniforms. Stable across platforms and runs. */
function tokenVector(token: string): Float64Array {
  const v = new Float64Array(EMBED_DIM);
  let filled = 0;
  for (let block = 0; filled < EMBED_DIM; block++) {
    const digest = createHash("sha256")
      .update(`embed-exporter\x00${token}\x00${block}`)
      .digest();
    for (let i = 0; i + 4 <= digest.length && filled < EMBED_DIM; i += 4) {
      const u = digest.readUInt32LE(i) / 2 ** 32; // [0, 1)
      v[filled++] = 2 * u - 1;
    }
  }
  return l2Normalize(v);
}

export function tokenize(label: string): string[] {
  return label
    .toLowerCase()
    .split(/[^a-z0-9]+/)
    .filter((t) => t.length > 0);
}

/** Compositional hash embedding: the normalized sum of per-token unit
 * vectors. Shared tokens raise cosine similarity; disjoint labels land
 * nearly orthogonal at dim 512. Needs no model or network. */
export function hashEmbed(label: string): Float64Array {
  const tokens = tokenize(label);
  if (tokens.length === 0) {
    throw new EmbedError(`label "${label}" has no usable tokens`);
  }
  const sum = new Float64Array(EMBED_DIM);
  for (const token of tokens) {
    const tv = tokenVector(token);
    for (let i = 0; i < EMBED_DIM; i++) sum[i] += tv[i];
  }
  return l2Normalize(sum);
}

async function clipEmbed(
  labels: string[],
  model: string,
): Promise<Float64Array[]> {
  let transformers;
  try {
    transformers = await import("@xenova/transformers");
  } catch (err) {
    throw new EmbedError(
      `cannot load @xenova/transformers (${(err as Error).message}); ` +
        "install it (npm install @xenova/transformers) or use --backend hash",
    );
  }
  const { AutoTokenizer, CLIPTextModelWithProjection } = transformers;
  let tokenizer, textModel;
  try {
    tokenizer = await AutoTokenizer.from_pretrained(model);
    textModel = await CLIPTextModelWithProjection.from_pretrained(model, {
      quantized: true,
    });
  } catch (err) {
    throw new EmbedError(
      `cannot load model "${model}" (${(err as Error).message}); ` +
        "the model must be downloadable or already cached locally " +
        "(offline runs can use --backend hash)",
    );
  }
  const inputs = tokenizer(labels, { padding: true, truncation: true });
  const { text_embeds } = await textModel(inputs);
  const [rows, cols] = text_embeds.dims as [number, number];
  if (cols !== EMBED_DIM) {
    throw new EmbedError(
      `model "${model}" produces ${cols}-d text embeddings, need ${EMBED_DIM}`,
    );
  }
  const data = text_embeds.data as Float32Array;
  const out: Float64Array[] = [];
  for (let r = 0; r < rows; r++) {
    out.push(l2Normalize(Float64Array.from(data.slice(r * cols, (r + 1) * cols))));
  }
  return out;
}

/** One unit-norm vector per label, in label order. */
export async function embedLabels(
  labels: string[],
  backend: Backend,
  model: string = DEFAULT_MODEL,
): Promise<Float64Array[]> {
  if (backend === "hash") return labels.map(hashEmbed);
  return clipEmbed(labels, model);
}

export function cosine(a: Float64Array, b: Float64Array): number {
  let dot = 0;
  for (let i = 0; i < a.length; i++) dot += a[i] * b[i];
  return dot;
}
