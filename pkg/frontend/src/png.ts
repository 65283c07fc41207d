/** Minimal PNG codec for 8-bit grayscale / RGB / RGBA images.
 *
 * Used by the node-side tests (the browser paths use canvas). Deflate is
 * delegated to node's zlib; everything else (chunks, CRC, filters) is here.
 */

import * as zlib from "zlib";

const SIGNATURE = Uint8Array.from([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Uint8Array[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (const byte of part) c = CRC_TABLE[(c ^ byte) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

function u32(v: number): Uint8Array {
  return Uint8Array.from([(v >>> 24) & 255, (v >>> 16) & 255, (v >>> 8) & 255, v & 255]);
}

function chunk(type: string, body: Uint8Array): Uint8Array {
  const tag = new TextEncoder().encode(type);
  const out = new Uint8Array(12 + body.length);
  out.set(u32(body.length), 0);
  out.set(tag, 4);
  out.set(body, 8);
  out.set(u32(crc32(tag, body)), 8 + body.length);
  return out;
}

export interface DecodedPng {
  width: number;
  height: number;
  channels: number; // 1 (gray), 3 (rgb) or 4 (rgba)
  data: Uint8Array; // row-major, channel-interleaved
}

function encode(width: number, height: number, channels: 1 | 3, data: Uint8Array): Uint8Array {
  if (data.length !== width * height * channels) {
    throw new Error(`pixel buffer length ${data.length} != ${width * height * channels}`);
  }
  const ihdr = new Uint8Array(13);
  ihdr.set(u32(width), 0);
  ihdr.set(u32(height), 4);
  ihdr[8] = 8; // bit depth
  ihdr[9] = channels === 1 ? 0 : 2; // color type
  const stride = width * channels;
  const raw = new Uint8Array((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0; // filter: None
    raw.set(data.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  const idat = new Uint8Array(zlib.deflateSync(raw));
  const parts = [
    SIGNATURE,
    chunk("IHDR", ihdr),
    chunk("IDAT", idat),
    chunk("IEND", new Uint8Array(0)),
  ];
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

export function encodeGray(width: number, height: number, data: Uint8Array): Uint8Array {
  return encode(width, height, 1, data);
}

export function encodeRGB(width: number, height: number, data: Uint8Array): Uint8Array {
  return encode(width, height, 3, data);
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

export function decode(bytes: Uint8Array): DecodedPng {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let width = 0;
  let height = 0;
  let colorType = -1;
  const idats: Uint8Array[] = [];
  let off = 8;
  while (off < bytes.length) {
    const len = (bytes[off] << 24) | (bytes[off + 1] << 16) | (bytes[off + 2] << 8) | bytes[off + 3];
    const type = String.fromCharCode(...bytes.subarray(off + 4, off + 8));
    const body = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      width = (body[0] << 24) | (body[1] << 16) | (body[2] << 8) | body[3];
      height = (body[4] << 24) | (body[5] << 16) | (body[6] << 8) | body[7];
      if (body[8] !== 8) throw new Error(`unsupported bit depth ${body[8]}`);
      colorType = body[9];
      if (body[12] !== 0) throw new Error("interlaced PNGs are unsupported");
    } else if (type === "IDAT") {
      idats.push(body);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + len;
  }
  const channels = colorType === 0 ? 1 : colorType === 2 ? 3 : colorType === 6 ? 4 : 0;
  if (!channels) throw new Error(`unsupported color type ${colorType}`);
  const compressed = new Uint8Array(idats.reduce((n, p) => n + p.length, 0));
  let ioff = 0;
  for (const p of idats) {
    compressed.set(p, ioff);
    ioff += p.length;
  }
  const raw = new Uint8Array(zlib.inflateSync(compressed));
  const stride = width * channels;
  const data = new Uint8Array(stride * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const out = data.subarray(y * stride, (y + 1) * stride);
    const prev = y > 0 ? data.subarray((y - 1) * stride, y * stride) : null;
    for (let x = 0; x < stride; x++) {
      const a = x >= channels ? out[x - channels] : 0;
      const b = prev ? prev[x] : 0;
      const c = x >= channels && prev ? prev[x - channels] : 0;
      let v = row[x];
      switch (filter) {
        case 0: break;
        case 1: v = (v + a) & 255; break;
        case 2: v = (v + b) & 255; break;
        case 3: v = (v + ((a + b) >> 1)) & 255; break;
        case 4: v = (v + paeth(a, b, c)) & 255; break;
        default: throw new Error(`unknown filter ${filter}`);
      }
      out[x] = v;
    }
  }
  return { width, height, channels, data };
}

export function toBase64(bytes: Uint8Array): string {
  return Buffer.from(bytes).toString("base64");
}

export function fromBase64(b64: string): Uint8Array {
  return new Uint8Array(Buffer.from(b64, "base64"));
}
