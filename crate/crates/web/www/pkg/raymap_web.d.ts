/* tslint:disable */
/* eslint-disable */
export class Demo {
  free(): void;
  [Symbol.dispose](): void;
  prior_rmse(site: number): number;
  observation_points(site: number): Float64Array;
  constructor(scenario_seed: number, obs_fraction: number);
  cols(): number;
  rows(): number;
  query(site: number, x: number, y: number): Float64Array;
  sites(): Uint32Array;
  bin_size(): number;
  prior_map(site: number): Float64Array;
  truth_map(site: number): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
  readonly memory: WebAssembly.Memory;
  readonly __wbg_demo_free: (a: number, b: number) => void;
  readonly demo_bin_size: (a: number) => number;
  readonly demo_cols: (a: number) => number;
  readonly demo_new: (a: number, b: number) => [number, number, number];
  readonly demo_observation_points: (a: number, b: number) => [number, number, number, number];
  readonly demo_prior_map: (a: number, b: number) => [number, number, number, number];
  readonly demo_prior_rmse: (a: number, b: number) => [number, number, number];
  readonly demo_query: (a: number, b: number, c: number, d: number) => [number, number, number, number];
  readonly demo_rows: (a: number) => number;
  readonly demo_sites: (a: number) => [number, number];
  readonly demo_truth_map: (a: number, b: number) => [number, number, number, number];
  readonly __wbindgen_export_0: WebAssembly.Table;
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
