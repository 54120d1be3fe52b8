/* tslint:disable */
/* eslint-disable */

export function features_view(vocab: number, dim: number, frames_per_label: number, sigma: number, shift: number, seed: bigint): string;

export function lattice_view(frames: number, labels: string, vocab: number, seed: bigint, spread: number): string;

export function multi_hypothesis_view(frames: number, hypotheses: string, vocab: number, seed: bigint, spread: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly features_view: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number];
    readonly lattice_view: (a: number, b: number, c: number, d: number, e: bigint, f: number) => [number, number];
    readonly multi_hypothesis_view: (a: number, b: number, c: number, d: number, e: bigint, f: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
