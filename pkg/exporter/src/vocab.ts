import { writeFile } from "node:fs/promises";
import { z } from "zod";

import { EMBED_DIM } from "./embed.js";

export const vocabularySchema = z
  .object({
    dim: z.number().int().positive(),
    entries: z.record(z.string().min(1), z.array(z.number().finite())),
  })
  .refine((v) => Object.keys(v.entries).length > 0, {
    message: "entries must not be empty",
  })
  .refine(
    (v) => Object.values(v.entries).every((e) => e.length === v.dim),
    { message: "every entry must have exactly `dim` values" },
  );

export type Vocabulary = z.infer<typeof vocabularySchema>;

export class LabelError extends Error {}

/** Labels must be non-blank and unique; duplicates name the offender. */
export function validateLabels(labels: string[]): void {
  if (labels.length === 0) throw new LabelError("no labels given");
  const seen = new Set<string>();
  for (const label of labels) {
    if (label.trim().length === 0) {
      throw new LabelError("labels must be non-empty text");
    }
    if (seen.has(label)) throw new LabelError(`duplicate label "${label}"`);
    seen.add(label);
  }
}

export function buildVocabulary(
  labels: string[],
  vectors: Float64Array[],
): Vocabulary {
  const entries: Record<string, number[]> = {};
  for (const label of [...labels].sort()) {
    entries[label] = Array.from(vectors[labels.indexOf(label)]);
  }
  return vocabularySchema.parse({ dim: EMBED_DIM, entries });
}

export async function writeVocabulary(
  path: string,
  vocab: Vocabulary,
): Promise<void> {
  await writeFile(path, JSON.stringify(vocab, null, 2) + "\n", "utf-8");
}
