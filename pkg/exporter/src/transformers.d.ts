// The clip backend loads transformers.js dynamically and only when
// requested; the package is an optional dependency, so give the import
// an untyped shape instead of requiring its types at build time.
declare module "@xenova/transformers";
