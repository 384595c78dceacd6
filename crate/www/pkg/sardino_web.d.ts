/* tslint:disable */
/* eslint-disable */

/**
 * A rendered synthetic tile.
 */
export class Preview {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    class_counts(): Uint32Array;
    labels_rgba(): Uint8Array;
    sar_rgba(): Uint8Array;
    readonly size: number;
}

export class Trainer {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * RGBA strip: input band, one panel per head, labels. Width via `strip_width`.
     */
    attention(tile: number, scale: number): Uint8Array;
    constructor(seed: bigint, centering: boolean, learning_rate: number);
    teacher_entropy(): number;
    /**
     * Runs `n` steps and returns `[epoch, loss, teacher entropy, teacher temperature]`.
     */
    train(n: number): Float64Array;
    readonly max_entropy: number;
    readonly num_heads: number;
    readonly steps: bigint;
    readonly strip_width: number;
}

export function class_names(): string[];

/**
 * Teacher probabilities for `logits`, with the entropy appended as the last element.
 */
export function explore(logits: Float32Array, center: Float32Array, tau: number): Float32Array;

export function palette(): Uint8Array;

export function preview_tile(seed: bigint, index: number, size: number, channel: number): Preview;

export function random_logits(k: number, seed: bigint): Float32Array;

export function teacher_temperature(epoch: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_preview_free: (a: number, b: number) => void;
    readonly __wbg_trainer_free: (a: number, b: number) => void;
    readonly class_names: () => [number, number];
    readonly explore: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly palette: () => [number, number];
    readonly preview_class_counts: (a: number) => [number, number];
    readonly preview_labels_rgba: (a: number) => [number, number];
    readonly preview_sar_rgba: (a: number) => [number, number];
    readonly preview_size: (a: number) => number;
    readonly preview_tile: (a: bigint, b: number, c: number, d: number) => [number, number, number];
    readonly random_logits: (a: number, b: bigint) => [number, number];
    readonly teacher_temperature: (a: number) => number;
    readonly trainer_attention: (a: number, b: number, c: number) => [number, number, number, number];
    readonly trainer_max_entropy: (a: number) => number;
    readonly trainer_new: (a: bigint, b: number, c: number) => [number, number, number];
    readonly trainer_num_heads: (a: number) => number;
    readonly trainer_steps: (a: number) => bigint;
    readonly trainer_strip_width: (a: number) => number;
    readonly trainer_teacher_entropy: (a: number) => [number, number, number];
    readonly trainer_train: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
