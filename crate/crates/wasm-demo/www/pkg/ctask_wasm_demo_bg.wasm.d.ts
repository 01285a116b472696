/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_image_rgba: (a: number) => [number, number];
export const demo_load_checkpoint: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_paint: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const demo_palette_rgba: (a: number) => [number, number];
export const demo_predict: (a: number) => [number, number];
export const demo_prediction_rgba: (a: number) => [number, number];
export const demo_probe: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_set_rule: (a: number, b: number, c: number, d: number) => [number, number];
export const demo_set_scene: (a: number, b: number) => [number, number];
export const demo_size: (a: number) => number;
export const demo_target_rgba: (a: number) => [number, number];
export const demo_tasks: (a: number) => number;
export const task_legend: () => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
