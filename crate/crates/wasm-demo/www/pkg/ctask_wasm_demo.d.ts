/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    image_rgba(): Uint8Array;
    /**
     * Replaces the network with a checkpoint written by `ctask train`.
     */
    load_checkpoint(sidecar: string, archive: Uint8Array): void;
    /**
     * A `size`×`size` scene with a freshly initialized tiny network.
     */
    constructor(scene_seed: number, size: number);
    /**
     * Sets every palette cell within `radius` of `(x, y)` to `task`.
     */
    paint(x: number, y: number, radius: number, task: string): void;
    palette_rgba(): Uint8Array;
    /**
     * Runs the network once for the current scene and palette.
     */
    predict(): void;
    /**
     * Composite render of the last prediction; empty before [`Demo::predict`].
     */
    prediction_rgba(): Uint8Array;
    /**
     * JSON description of pixel `(x, y)`: its task, label and prediction.
     */
    probe(x: number, y: number): string;
    /**
     * Regenerates the palette with a rule name (`s:<task>`, `r1r`, `r2`, `r3`, `rnd`).
     */
    set_rule(rule: string, seed: number): void;
    set_scene(seed: number): void;
    size(): number;
    /**
     * Ground truth stitched with the same per-pixel task choice.
     */
    target_rgba(): Uint8Array;
    /**
     * Number of tasks the loaded network was trained for.
     */
    tasks(): number;
}

/**
 * Task names with their palette colors, as JSON.
 */
export function task_legend(): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_image_rgba: (a: number) => [number, number];
    readonly demo_load_checkpoint: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_paint: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly demo_palette_rgba: (a: number) => [number, number];
    readonly demo_predict: (a: number) => [number, number];
    readonly demo_prediction_rgba: (a: number) => [number, number];
    readonly demo_probe: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_set_rule: (a: number, b: number, c: number, d: number) => [number, number];
    readonly demo_set_scene: (a: number, b: number) => [number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_target_rgba: (a: number) => [number, number];
    readonly demo_tasks: (a: number) => number;
    readonly task_legend: () => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
