/* tslint:disable */
/* eslint-disable */

export class WebDemo {
    free(): void;
    [Symbol.dispose](): void;
    adapt(tx: number, ty: number, shots: number, seed: number): string;
    static extent(): number;
    field(res: number): Float64Array;
    constructor(seed: number, k_init: number, epochs: number);
    points(): Float64Array;
    /**
     * Thresholds below -1 select the per-class default.
     */
    prune(t_live: number, t_spoof: number): string;
    reset(): void;
    summary(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_webdemo_free: (a: number, b: number) => void;
    readonly webdemo_adapt: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly webdemo_extent: () => number;
    readonly webdemo_field: (a: number, b: number) => [number, number, number, number];
    readonly webdemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly webdemo_points: (a: number) => [number, number];
    readonly webdemo_prune: (a: number, b: number, c: number) => [number, number, number, number];
    readonly webdemo_reset: (a: number) => void;
    readonly webdemo_summary: (a: number) => [number, number, number, number];
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
