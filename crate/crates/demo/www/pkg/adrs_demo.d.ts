/* tslint:disable */
/* eslint-disable */

/**
 * Applies a generator reply (SEARCH/REPLACE blocks or one fenced block) to
 * a program with `#` EVOLVE-BLOCK markers.
 */
export function apply_edit(program: string, reply: string): string;

/**
 * Reorders a CSV table with the greedy group recursion and reports the
 * prefix hit rate before and after.
 */
export function reorder_table(csv: string): string;

/**
 * Scores a spot-scheduling policy document on a named trace set
 * (`full`, `multi` or `available`) and returns the evaluator report.
 */
export function simulate_policy(policy: string, split: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly apply_edit: (a: number, b: number, c: number, d: number) => [number, number];
    readonly reorder_table: (a: number, b: number) => [number, number];
    readonly simulate_policy: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
