/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_preview_free: (a: number, b: number) => void;
export const __wbg_trainer_free: (a: number, b: number) => void;
export const class_names: () => [number, number];
export const explore: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const palette: () => [number, number];
export const preview_class_counts: (a: number) => [number, number];
export const preview_labels_rgba: (a: number) => [number, number];
export const preview_sar_rgba: (a: number) => [number, number];
export const preview_size: (a: number) => number;
export const preview_tile: (a: bigint, b: number, c: number, d: number) => [number, number, number];
export const random_logits: (a: number, b: bigint) => [number, number];
export const teacher_temperature: (a: number) => number;
export const trainer_attention: (a: number, b: number, c: number) => [number, number, number, number];
export const trainer_max_entropy: (a: number) => number;
export const trainer_new: (a: bigint, b: number, c: number) => [number, number, number];
export const trainer_num_heads: (a: number) => number;
export const trainer_steps: (a: number) => bigint;
export const trainer_strip_width: (a: number) => number;
export const trainer_teacher_entropy: (a: number) => [number, number, number];
export const trainer_train: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
