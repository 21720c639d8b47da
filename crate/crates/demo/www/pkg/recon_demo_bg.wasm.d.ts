/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const fragment_decision: (a: number, b: number) => [number, number];
export const rigid_fit: (a: number, b: number, c: number) => [number, number, number, number];
export const sphere_mesh_stats: (a: number, b: number) => [number, number, number, number];
export const sphere_wireframe: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
