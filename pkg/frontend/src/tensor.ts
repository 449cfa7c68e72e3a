/**
 * Binary tensor file I/O (.sat).
 *
 * Layout: magic "SAT1", dtype code octet (1 = f32, 2 = f64), ndim octet,
 * two reserved zero octets, ndim little-endian uint64 dims, then the raw
 * little-endian row-major payload. NaN/Inf payloads are rejected in both
 * directions so consumers can assume finite data.
 */

import { readFileSync, writeFileSync } from 'node:fs'

export interface Tensor {
  dtype: 'f32' | 'f64'
  shape: number[]
  data: Float32Array | Float64Array
}

const MAGIC = 'SAT1'

export function numElements(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1)
}

export function makeTensor(shape: number[], data: Float32Array | Float64Array): Tensor {
  if (numElements(shape) !== data.length) {
    throw new Error(`shape ${JSON.stringify(shape)} does not match ${data.length} elements`)
  }
  return { dtype: data instanceof Float32Array ? 'f32' : 'f64', shape: [...shape], data }
}

function assertFinite(data: Float32Array | Float64Array, context: string): void {
  for (let i = 0; i < data.length; i++) {
    if (!Number.isFinite(data[i])) {
      throw new Error(`${context}: non-finite value at index ${i}`)
    }
  }
}

export function writeSat(path: string, t: Tensor): void {
  if (t.shape.some((d) => d < 1)) {
    throw new Error(`tensor dimensions must be >= 1, got ${JSON.stringify(t.shape)}`)
  }
  assertFinite(t.data, path)
  const itemSize = t.dtype === 'f32' ? 4 : 8
  const buf = Buffer.alloc(8 + 8 * t.shape.length + itemSize * t.data.length)
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt8(t.dtype === 'f32' ? 1 : 2, 4)
  buf.writeUInt8(t.shape.length, 5)
  let off = 8
  for (const dim of t.shape) {
    buf.writeBigUInt64LE(BigInt(dim), off)
    off += 8
  }
  for (let i = 0; i < t.data.length; i++) {
    if (t.dtype === 'f32') buf.writeFloatLE(t.data[i], off)
    else buf.writeDoubleLE(t.data[i], off)
    off += itemSize
  }
  writeFileSync(path, buf)
}

export function readSat(path: string): Tensor {
  const buf = readFileSync(path)
  if (buf.length < 8 || buf.toString('ascii', 0, 4) !== MAGIC) {
    throw new Error(`${path}: not a .sat tensor file`)
  }
  const code = buf.readUInt8(4)
  const ndim = buf.readUInt8(5)
  if (code !== 1 && code !== 2) throw new Error(`${path}: unknown dtype code ${code}`)
  const shape: number[] = []
  let off = 8
  for (let i = 0; i < ndim; i++) {
    shape.push(Number(buf.readBigUInt64LE(off)))
    off += 8
  }
  const n = numElements(shape)
  const itemSize = code === 1 ? 4 : 8
  if (buf.length !== off + n * itemSize) {
    throw new Error(`${path}: payload size mismatch`)
  }
  const data = code === 1 ? new Float32Array(n) : new Float64Array(n)
  for (let i = 0; i < n; i++) {
    data[i] = code === 1 ? buf.readFloatLE(off) : buf.readDoubleLE(off)
    off += itemSize
  }
  assertFinite(data, path)
  return { dtype: code === 1 ? 'f32' : 'f64', shape, data }
}
