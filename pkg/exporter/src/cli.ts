#!/usr/bin/env node
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { Backend, DEFAULT_MODEL, EmbedError, embedLabels } from "./embed.js";
import { LabelError, buildVocabulary, validateLabels, writeVocabulary } from "./vocab.js";

export async function runExport(args: {
  label: string[];
  out: string;
  model: string;
  backend: Backend;
}): Promise<void> {
  validateLabels(args.label);
  const vectors = await embedLabels(args.label, args.backend, args.model);
  const vocab = buildVocabulary(args.label, vectors);
  await writeVocabulary(args.out, vocab);
  console.log(
    `wrote ${args.label.length} ${args.backend} embeddings (dim ${vocab.dim}) to ${args.out}`,
  );
}

async function main(): Promise<void> {
  await yargs(hideBin(process.argv))
    .scriptName("embed-exporter")
    .command(
      "export",
      "embed labels and write a vocabulary JSON",
      (y) =>
        y
          .option("label", {
            type: "string",
            array: true,
            demandOption: true,
            describe: "label text to embed (repeatable)",
          })
          .option("out", {
            type: "string",
            demandOption: true,
            describe: "output vocabulary JSON path",
          })
          .option("model", {
            type: "string",
            default: DEFAULT_MODEL,
            describe: "text encoder model id (clip backend)",
          })
          .option("backend", {
            choices: ["clip", "hash"] as const,
            default: "clip" as Backend,
            describe: "clip: real text encoder; hash: deterministic offline stand-in",
          }),
      async (argv) => {
        await runExport({
          label: argv.label as string[],
          out: argv.out as string,
          model: argv.model as string,
          backend: argv.backend as Backend,
        });
      },
    )
    .demandCommand(1, "specify a command (export)")
    .strict()
    .fail((msg, err) => {
      if (err instanceof LabelError || err instanceof EmbedError) {
        console.error(`error: ${err.message}`);
      } else if (err) {
        throw err;
      } else {
        console.error(`error: ${msg}`);
      }
      process.exit(err ? 1 : 2);
    })
    .parseAsync();
}

main().catch((err) => {
  console.error(`error: ${err?.message ?? err}`);
  process.exit(1);
});
