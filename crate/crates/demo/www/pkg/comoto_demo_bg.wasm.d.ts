/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const froc_demo: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const image_size: () => number;
export const sample_overlay: (a: number, b: number, c: number, d: number) => [number, number];
export const sample_slice: (a: number, b: number, c: number, d: number) => [number, number];
export const slice_count: (a: number) => number;
export const soften_logits: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
