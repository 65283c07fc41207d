/** Single-channel paint buffer backing the mask editor.
 *
 * Values are 0 (keep) or 255 (hole). The bitmap always matches the loaded
 * image's dimensions; painting happens in image coordinates.
 */
export class MaskBitmap {
  readonly width: number;
  readonly height: number;
  private data: Uint8Array;

  constructor(width: number, height: number, data?: Uint8Array) {
    if (width < 1 || height < 1) throw new Error("mask dims must be positive");
    if (data && data.length !== width * height) {
      throw new Error(`mask data length ${data.length} != ${width * height}`);
    }
    this.width = width;
    this.height = height;
    this.data = data ? data.slice() : new Uint8Array(width * height);
  }

  get(x: number, y: number): number {
    return this.data[y * this.width + x];
  }

  /** Stamp a filled disk; value 255 paints, 0 erases. */
  stamp(cx: number, cy: number, radius: number, value: 0 | 255 = 255): void {
    const r = Math.max(0, radius);
    const x0 = Math.max(0, Math.floor(cx - r));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + r));
    const y0 = Math.max(0, Math.floor(cy - r));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + r));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        if ((x - cx) ** 2 + (y - cy) ** 2 <= r * r) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Stamp a filled axis-aligned rectangle (inclusive corners). */
  fillRect(x0: number, y0: number, x1: number, y1: number, value: 0 | 255 = 255): void {
    const [xa, xb] = x0 <= x1 ? [x0, x1] : [x1, x0];
    const [ya, yb] = y0 <= y1 ? [y0, y1] : [y1, y0];
    for (let y = Math.max(0, ya); y <= Math.min(this.height - 1, yb); y++) {
      for (let x = Math.max(0, xa); x <= Math.min(this.width - 1, xb); x++) {
        this.data[y * this.width + x] = value;
      }
    }
  }

  clear(): void {
    this.data.fill(0);
  }

  paintedCount(): number {
    let n = 0;
    for (const v of this.data) if (v === 255) n++;
    return n;
  }

  isEmpty(): boolean {
    return this.paintedCount() === 0;
  }

  /** Snapshot as a plain 0/255 byte array (row-major). */
  export(): Uint8Array {
    return this.data.slice();
  }

  /** Restore from an exported bitmap; dimensions must match. */
  static import(width: number, height: number, data: Uint8Array): MaskBitmap {
    const bm = new MaskBitmap(width, height, data);
    // normalize to strict 0/255 (uploaded PNGs may carry greys)
    for (let i = 0; i < bm.data.length; i++) {
      bm.data[i] = bm.data[i] >= 128 ? 255 : 0;
    }
    return bm;
  }

  equals(other: MaskBitmap): boolean {
    if (other.width !== this.width || other.height !== this.height) return false;
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== other.data[i]) return false;
    }
    return true;
  }
}
