/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_dyeensemble_free: (a: number, b: number) => void;
export const calibrationTable: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const dyeensemble_advance: (a: number, b: number) => [number, number, number];
export const dyeensemble_field: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const dyeensemble_height: (a: number) => number;
export const dyeensemble_members: (a: number) => number;
export const dyeensemble_new: (a: number, b: number, c: number) => [number, number, number];
export const dyeensemble_solidMask: (a: number) => [number, number];
export const dyeensemble_width: (a: number) => number;
export const rmTrajectories: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
