/* tslint:disable */
/* eslint-disable */

export function centersReport(classes: number, bits: number, seed: number): string;

/**
 * RGBA strip of synthetic images; width via [`glyph_strip_width`].
 */
export function glyphStrip(seed: number, _class: number, count: number): Uint8Array;

export function glyphStripWidth(count: number): number;

export function retrievalReport(classes: number, bits: number, seed: number, per_class: number, flip: number, query: number, r: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly centersReport: (a: number, b: number, c: number) => [number, number, number, number];
    readonly glyphStrip: (a: number, b: number, c: number) => [number, number, number, number];
    readonly glyphStripWidth: (a: number) => number;
    readonly retrievalReport: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
