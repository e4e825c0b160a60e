/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_trend_free: (a: number, b: number) => void;
export const coefficientCurve: (a: number) => [number, number, number, number];
export const distillCurve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const expansionTrend: (a: number, b: number, c: number, d: number) => [number, number, number];
export const trend_degenerate: (a: number) => number;
export const trend_explained_variance_ratio: (a: number) => number;
export const trend_intercept: (a: number) => number;
export const trend_layers: (a: number) => [number, number];
export const trend_r_squared: (a: number) => number;
export const trend_residual: (a: number) => number;
export const trend_scores: (a: number) => [number, number];
export const trend_slope: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
