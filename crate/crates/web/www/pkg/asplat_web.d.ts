/* tslint:disable */
/* eslint-disable */

/**
 * Samples up to `count` anchors from four orbit views and returns their
 * pixel positions in the view at `theta` as `[x0, y0, x1, y1, ...]`.
 * Anchors hidden behind geometry are omitted.
 */
export function anchor_points(preset: string, theta: number, count: number, width: number, height: number): Float32Array;

/**
 * Ray-traced view of a preset from orbit angle `theta` (radians).
 */
export function room_view(preset: string, theta: number, width: number, height: number): Uint8Array;

/**
 * One Gaussian one unit in front of the camera, rendered on a dark
 * background. Scales are in scene units, `angle` rotates about the view
 * axis (radians), color channels are in `[0, 1]`.
 */
export function splat_preview(sx: number, sy: number, angle: number, opacity: number, r: number, g: number, b: number, size: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly anchor_points: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly room_view: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly splat_preview: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
