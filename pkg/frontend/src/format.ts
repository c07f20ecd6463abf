/** Binary tensor codec matching the primary's file format.
 *
 * Layout, little endian throughout, no padding or compression:
 *
 *     offset  size      field
 *     0       6         magic bytes "PSF4D\0"
 *     6       2         format version, u16 (currently 1)
 *     8       1         dtype tag, u8: 0 = float64, 1 = float32
 *     9       1         rank, u8
 *     10      8 * rank  axis lengths, u64 each
 *     ...     payload   row-major element bytes
 *
 * Decoding always yields float64 values; a float32 payload upcasts
 * exactly. Wrong magic, unknown version or tag, a short payload, and
 * trailing bytes are each rejected.
 */

import { TensorFormatError } from "./errors.js";

export const MAGIC = Buffer.from("PSF4D\0", "latin1");
export const FORMAT_VERSION = 1;
export const MAX_RANK = 32;

const TAG_F64 = 0;
const TAG_F32 = 1;

/** Dense row-major float64 tensor. */
export interface Tensor {
  readonly shape: readonly number[];
  readonly values: Float64Array;
}

export function elementCount(shape: readonly number[]): number {
  let count = 1;
  for (const dim of shape) {
    if (!Number.isInteger(dim) || dim < 0) {
      throw new TensorFormatError(`bad axis length ${dim}`);
    }
    count *= dim;
  }
  return count;
}

/** Pair a shape with its values, checking the element count. */
export function tensorFrom(
  shape: readonly number[],
  values: Float64Array | readonly number[],
): Tensor {
  const flat =
    values instanceof Float64Array ? values : Float64Array.from(values);
  const expected = elementCount(shape);
  if (flat.length !== expected) {
    throw new TensorFormatError(
      `shape [${shape.join(", ")}] holds ${expected} elements, got ${flat.length}`,
    );
  }
  return { shape: [...shape], values: flat };
}

export function encodeTensor(
  tensor: Tensor,
  dtype: "f64" | "f32" = "f64",
): Buffer {
  const { shape, values } = tensorFrom(tensor.shape, tensor.values);
  if (shape.length > MAX_RANK) {
    throw new TensorFormatError(
      `rank ${shape.length} exceeds the format maximum ${MAX_RANK}`,
    );
  }
  const header = Buffer.alloc(MAGIC.length + 4 + 8 * shape.length);
  MAGIC.copy(header, 0);
  header.writeUInt16LE(FORMAT_VERSION, MAGIC.length);
  header.writeUInt8(dtype === "f64" ? TAG_F64 : TAG_F32, MAGIC.length + 2);
  header.writeUInt8(shape.length, MAGIC.length + 3);
  shape.forEach((dim, axis) => {
    header.writeBigUInt64LE(BigInt(dim), MAGIC.length + 4 + 8 * axis);
  });
  const payload =
    dtype === "f64"
      ? Buffer.from(values.buffer, values.byteOffset, values.byteLength)
      : Buffer.from(Float32Array.from(values).buffer);
  return Buffer.concat([header, payload]);
}

export function decodeTensor(blob: Buffer): Tensor {
  if (blob.length < MAGIC.length || !blob.subarray(0, MAGIC.length).equals(MAGIC)) {
    throw new TensorFormatError(
      `bad magic ${JSON.stringify(blob.subarray(0, MAGIC.length).toString("latin1"))}`,
    );
  }
  if (blob.length < MAGIC.length + 4) {
    throw new TensorFormatError("file ends inside the fixed header");
  }
  const version = blob.readUInt16LE(MAGIC.length);
  if (version !== FORMAT_VERSION) {
    throw new TensorFormatError(
      `format version ${version}, this reader handles ${FORMAT_VERSION}`,
    );
  }
  const tag = blob.readUInt8(MAGIC.length + 2);
  if (tag !== TAG_F64 && tag !== TAG_F32) {
    throw new TensorFormatError(`unknown dtype tag ${tag}`);
  }
  const rank = blob.readUInt8(MAGIC.length + 3);
  if (rank > MAX_RANK) {
    throw new TensorFormatError(
      `rank ${rank} exceeds the format maximum ${MAX_RANK}`,
    );
  }
  let offset = MAGIC.length + 4;
  if (blob.length < offset + 8 * rank) {
    throw new TensorFormatError("file ends inside the axis-length table");
  }
  const shape: number[] = [];
  for (let axis = 0; axis < rank; axis += 1) {
    const dim = blob.readBigUInt64LE(offset + 8 * axis);
    if (dim > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new TensorFormatError(`axis length ${dim} is not addressable`);
    }
    shape.push(Number(dim));
  }
  offset += 8 * rank;
  const itemSize = tag === TAG_F64 ? 8 : 4;
  const count = elementCount(shape);
  const expected = count * itemSize;
  const got = blob.length - offset;
  if (got < expected) {
    throw new TensorFormatError(
      `payload holds ${got} bytes, header promises ${expected}`,
    );
  }
  if (got > expected) {
    throw new TensorFormatError(`${got - expected} trailing bytes after the payload`);
  }
  // copy into a fresh ArrayBuffer: Buffer pooling does not guarantee
  // the 8-byte alignment a Float64Array view needs
  const payload = new ArrayBuffer(expected);
  new Uint8Array(payload).set(blob.subarray(offset, offset + expected));
  const values =
    tag === TAG_F64
      ? new Float64Array(payload)
      : Float64Array.from(new Float32Array(payload));
  return { shape, values };
}
