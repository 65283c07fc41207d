import { describe, expect, it } from "vitest";
import { MaskBitmap } from "../src/maskBitmap.js";

describe("MaskBitmap", () => {
  it("starts empty", () => {
    const m = new MaskBitmap(64, 64);
    expect(m.isEmpty()).toBe(true);
    expect(m.export().every((v) => v === 0)).toBe(true);
  });

  it("stamps disks inside bounds", () => {
    const m = new MaskBitmap(64, 64);
    m.stamp(10, 10, 3);
    expect(m.get(10, 10)).toBe(255);
    expect(m.get(13, 10)).toBe(255);
    expect(m.get(14, 10)).toBe(0);
    expect(m.paintedCount()).toBeGreaterThan(20);
  });

  it("erases with value 0", () => {
    const m = new MaskBitmap(32, 32);
    m.stamp(16, 16, 5);
    m.stamp(16, 16, 5, 0);
    expect(m.isEmpty()).toBe(true);
  });

  it("clamps stamps at the border", () => {
    const m = new MaskBitmap(16, 16);
    m.stamp(0, 0, 4);
    m.stamp(15, 15, 4);
    expect(m.get(0, 0)).toBe(255);
    expect(m.get(15, 15)).toBe(255);
  });

  it("fills rectangles with either corner order", () => {
    const a = new MaskBitmap(16, 16);
    a.fillRect(2, 3, 6, 8);
    const b = new MaskBitmap(16, 16);
    b.fillRect(6, 8, 2, 3);
    expect(a.equals(b)).toBe(true);
    expect(a.get(2, 3)).toBe(255);
    expect(a.get(6, 8)).toBe(255);
    expect(a.get(7, 8)).toBe(0);
  });

  it("round-trips export/import losslessly", () => {
    const m = new MaskBitmap(48, 48);
    m.stamp(10, 12, 4);
    m.fillRect(20, 20, 40, 30);
    const again = MaskBitmap.import(48, 48, m.export());
    expect(again.equals(m)).toBe(true);
  });

  it("normalizes grey levels on import", () => {
    const data = new Uint8Array(4 * 4);
    data[0] = 200;
    data[1] = 127;
    const m = MaskBitmap.import(4, 4, data);
    expect(m.get(0, 0)).toBe(255);
    expect(m.get(1, 0)).toBe(0);
  });

  it("rejects mismatched dimensions", () => {
    expect(() => new MaskBitmap(4, 4, new Uint8Array(3))).toThrow();
  });
});
