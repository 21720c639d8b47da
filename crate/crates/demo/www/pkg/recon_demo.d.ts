/* tslint:disable */
/* eslint-disable */

/**
 * Whether a keyframe with `corrs` filtered matches and the given overlap
 * stays in the current fragment. A negative overlap means no pose.
 */
export function fragment_decision(corrs: number, overlap: number): string;

/**
 * Plants a random rigid motion on `n` points in a 20 cm cube, perturbs the
 * targets with Gaussian noise and recovers the motion.
 *
 * Returns `[rotation error deg, translation error cm, rms residual cm]`.
 */
export function rigid_fit(n: number, noise_cm: number, seed: number): Float64Array;

/**
 * Fuses the signed distance of a sphere and extracts its mesh.
 *
 * Returns `[vertices, triangles, boundary edges, mean radial error cm]`.
 */
export function sphere_mesh_stats(radius: number, voxel: number): Float64Array;

/**
 * Wireframe of the sphere mesh, rotated by `yaw` and `pitch` (radians) and
 * projected orthographically. Flat `[x0, y0, x1, y1, ...]` per edge, in cm.
 */
export function sphere_wireframe(radius: number, voxel: number, yaw: number, pitch: number): Float32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly fragment_decision: (a: number, b: number) => [number, number];
    readonly rigid_fit: (a: number, b: number, c: number) => [number, number, number, number];
    readonly sphere_mesh_stats: (a: number, b: number) => [number, number, number, number];
    readonly sphere_wireframe: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
