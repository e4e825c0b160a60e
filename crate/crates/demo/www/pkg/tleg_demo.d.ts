/* tslint:disable */
/* eslint-disable */

/**
 * PC1 scores of an expanded stack and their straight-line fit.
 */
export class Trend {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly degenerate: boolean;
    readonly explained_variance_ratio: number;
    readonly intercept: number;
    readonly layers: Float64Array;
    /**
     * NaN when the stack is degenerate.
     */
    readonly r_squared: number;
    /**
     * NaN below three layers.
     */
    readonly residual: number;
    readonly scores: Float64Array;
    readonly slope: number;
}

export function coefficientCurve(depth: number): Float64Array;

export function distillCurve(student: Float64Array, teacher: Float64Array, taus: Float64Array, teacher_target: boolean): Float64Array;

export function expansionTrend(depth: number, a_scale: number, noise: number, seed: number): Trend;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_trend_free: (a: number, b: number) => void;
    readonly coefficientCurve: (a: number) => [number, number, number, number];
    readonly distillCurve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly expansionTrend: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly trend_degenerate: (a: number) => number;
    readonly trend_explained_variance_ratio: (a: number) => number;
    readonly trend_intercept: (a: number) => number;
    readonly trend_layers: (a: number) => [number, number];
    readonly trend_r_squared: (a: number) => number;
    readonly trend_residual: (a: number) => number;
    readonly trend_scores: (a: number) => [number, number];
    readonly trend_slope: (a: number) => number;
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
