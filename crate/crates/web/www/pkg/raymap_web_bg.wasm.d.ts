/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_bin_size: (a: number) => number;
export const demo_cols: (a: number) => number;
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_observation_points: (a: number, b: number) => [number, number, number, number];
export const demo_prior_map: (a: number, b: number) => [number, number, number, number];
export const demo_prior_rmse: (a: number, b: number) => [number, number, number];
export const demo_query: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_rows: (a: number) => number;
export const demo_sites: (a: number) => [number, number];
export const demo_truth_map: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_export_0: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
