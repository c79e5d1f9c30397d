/* tslint:disable */
/* eslint-disable */

/**
 * Scores a simulated detector on `cases` synthetic images. Each lesion is
 * found with probability `1 - miss_rate`; each case also gets up to
 * `2 * fp_rate` spurious boxes. Returns JSON with the FROC points and the
 * summary metrics.
 */
export function froc_demo(seed: number, cases: number, miss_rate: number, fp_rate: number, noise: number): string;

export function image_size(): number;

/**
 * JSON list of the lesions visible on `slice`, each with its box and the
 * nine critical points mapped back to image coordinates (cell centers).
 */
export function sample_overlay(seed: number, volume: boolean, index: number, slice: number): string;

/**
 * Row-major intensities of one slice.
 */
export function sample_slice(seed: number, volume: boolean, index: number, slice: number): Float32Array;

export function slice_count(volume: boolean): number;

/**
 * Softmax of `logits / tau`, the per-point distribution the lesion
 * distillation compares.
 */
export function soften_logits(logits: Float64Array, tau: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly froc_demo: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly image_size: () => number;
    readonly sample_overlay: (a: number, b: number, c: number, d: number) => [number, number];
    readonly sample_slice: (a: number, b: number, c: number, d: number) => [number, number];
    readonly slice_count: (a: number) => number;
    readonly soften_logits: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
