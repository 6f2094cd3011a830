// Byte-for-byte protocol conformance against the server side's committed
// golden frames, plus strict-decode rejection checks.

import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import {
  decodeFrame,
  encodeFrame,
  FrameDecoder,
  kindOf,
  Message,
  MESSAGE_TYPE_NAMES,
  ProtocolError,
} from "../src/wire.js";

interface GoldenFrame {
  name: string;
  type: string;
  kind: number;
  frame_hex: string;
  fields: Record<string, unknown>;
}

const goldenDir = new URL("../../tests/data/golden/", import.meta.url);
const manifest: { frames: GoldenFrame[] } = JSON.parse(
  readFileSync(new URL("manifest.json", goldenDir), "utf-8"),
);
const framesBin = new Uint8Array(readFileSync(new URL("frames.bin", goldenDir)));

function hexToBytes(hex: string): Uint8Array {
  const out = new Uint8Array(hex.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(hex.slice(2 * i, 2 * i + 2), 16);
  }
  return out;
}

function bytesToHex(bytes: Uint8Array): string {
  return [...bytes].map((b) => b.toString(16).padStart(2, "0")).join("");
}

// manifest field values use {hex: ...} for byte strings; revive those
function revive(value: unknown): unknown {
  if (Array.isArray(value)) return value.map(revive);
  if (value && typeof value === "object") {
    const entries = Object.entries(value as Record<string, unknown>);
    if (entries.length === 1 && entries[0]![0] === "hex") {
      return hexToBytes(entries[0]![1] as string);
    }
    return Object.fromEntries(entries.map(([k, v]) => [k, revive(v)]));
  }
  return value;
}

// decoded message back to the manifest's JSON shape
function jsonable(value: unknown): unknown {
  if (value instanceof Uint8Array) return { hex: bytesToHex(value) };
  if (Array.isArray(value)) return value.map(jsonable);
  if (value && typeof value === "object") {
    return Object.fromEntries(
      Object.entries(value as Record<string, unknown>).map(([k, v]) => [k, jsonable(v)]),
    );
  }
  return value;
}

function messageFields(message: Message): Record<string, unknown> {
  const { type: _ignored, ...fields } = message as unknown as Record<string, unknown>;
  return jsonable(fields) as Record<string, unknown>;
}

describe("golden frames", () => {
  it("covers every message kind in both directions", () => {
    const covered = new Set(manifest.frames.map((f) => f.kind));
    for (const name of MESSAGE_TYPE_NAMES) {
      expect(covered.has(kindOf(name)), `kind for ${name} missing from manifest`).toBe(true);
    }
  });

  for (const frame of manifest.frames) {
    it(`decodes ${frame.name} to the manifest fields`, () => {
      const message = decodeFrame(hexToBytes(frame.frame_hex));
      expect(message.type).toBe(frame.type);
      expect(kindOf(message.type)).toBe(frame.kind);
      expect(messageFields(message)).toEqual(frame.fields);
    });

    it(`re-encodes ${frame.name} to identical bytes`, () => {
      const message = {
        type: frame.type,
        ...(revive(frame.fields) as Record<string, unknown>),
      } as unknown as Message;
      expect(bytesToHex(encodeFrame(message))).toBe(frame.frame_hex);
    });
  }

  it("streams frames.bin in manifest order", () => {
    const decoder = new FrameDecoder();
    const messages = decoder.feed(framesBin);
    expect(messages.length).toBe(manifest.frames.length);
    messages.forEach((message, i) => {
      expect(message.type).toBe(manifest.frames[i]!.type);
      expect(messageFields(message)).toEqual(manifest.frames[i]!.fields);
    });
  });

  it("splits frames fed one byte at a time", () => {
    const decoder = new FrameDecoder();
    const messages: Message[] = [];
    for (const byte of framesBin) {
      messages.push(...decoder.feed(new Uint8Array([byte])));
    }
    expect(messages.length).toBe(manifest.frames.length);
  });
});

describe("strict decode", () => {
  const ack = encodeFrame({ type: "Ack", count: 7 });

  it("round-trips a message", () => {
    expect(decodeFrame(ack)).toEqual({ type: "Ack", count: 7 });
  });

  it("rejects an unknown kind", () => {
    const frame = ack.slice();
    frame[4] = 0x7f;
    expect(() => decodeFrame(frame)).toThrow(ProtocolError);
  });

  it("rejects truncation", () => {
    expect(() => decodeFrame(ack.subarray(0, ack.length - 1))).toThrow(ProtocolError);
  });

  it("rejects trailing bytes", () => {
    const frame = new Uint8Array(ack.length + 1);
    frame.set(ack);
    new DataView(frame.buffer).setUint32(0, ack.length - 3);
    expect(() => decodeFrame(frame)).toThrow(/trailing/);
  });

  it("rejects a length prefix that disagrees with the payload", () => {
    const frame = ack.slice();
    new DataView(frame.buffer).setUint32(0, 3);
    expect(() => decodeFrame(frame)).toThrow(/length prefix/);
  });

  it("rejects a bad bool byte", () => {
    const frame = encodeFrame({ type: "BoolReply", value: true }).slice();
    frame[5] = 2;
    expect(() => decodeFrame(frame)).toThrow(/bool byte/);
  });

  it("rejects a bad status byte", () => {
    const frame = encodeFrame({
      type: "BatchGrant",
      status: 1,
      epoch: 0,
      task: "",
      rows: [],
      columns: [],
      locations: [],
      issued_to: "",
    }).slice();
    frame[5] = 9;
    expect(() => decodeFrame(frame)).toThrow(/status byte/);
  });

  it("rejects token counts on a fifo request", () => {
    const frame = encodeFrame({
      type: "RequestBatch",
      task: "t",
      consumer: "t/0",
      micro_batch: 2,
      policy: 1,
      token_counts: [[0, 5]],
    }).slice();
    // policy byte sits after two strings and a u32: 2+1 ("t") + 2+3 ("t/0") + 4
    frame[5 + 12] = 0;
    expect(() => decodeFrame(frame)).toThrow(/token counts/);
  });

  it("rejects an absurd list count", () => {
    const frame = encodeFrame({ type: "Get", rows: [], columns: [] }).slice();
    new DataView(frame.buffer).setUint32(5, 0xffffff);
    expect(() => decodeFrame(frame)).toThrow(/list count/);
  });

  it("refuses an oversized declared length in the stream decoder", () => {
    const decoder = new FrameDecoder();
    const prefix = new Uint8Array(4);
    new DataView(prefix.buffer).setUint32(0, (1 << 26) + 1);
    expect(() => decoder.feed(prefix)).toThrow(/cap/);
  });

  it("rejects u64 values beyond the safe integer range on encode", () => {
    expect(() => encodeFrame({ type: "Ack", count: 2 ** 53 })).toThrow(ProtocolError);
  });
});
