/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const features_view: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number];
export const lattice_view: (a: number, b: number, c: number, d: number, e: bigint, f: number) => [number, number];
export const multi_hypothesis_view: (a: number, b: number, c: number, d: number, e: bigint, f: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
