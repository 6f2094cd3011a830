// Binary wire protocol: framing, primitives, and every message kind.
//
// A frame is a 4-byte big-endian length prefix (counting the kind byte
// plus the body), one kind byte, then a kind-specific body built from a
// small set of primitives:
//
//     u8 / u32 / u64      unsigned big-endian integers
//     str                 u16 length + UTF-8 bytes
//     blob                u32 length + raw bytes
//     list                u32 count + elements
//
// Decoding is strict: truncated input, trailing bytes, unknown kinds, and
// out-of-range enum values all throw ProtocolError rather than guessing.
// Message field names keep the protocol's snake_case spelling so they line
// up one-to-one with the golden-frame manifest the server side publishes.

export const MAX_FRAME = 1 << 26; // 64 MiB

export const POLICY_FIFO = 0;
export const POLICY_TOKEN_BALANCED = 1;

export const BATCH_OK = 0;
export const BATCH_NOT_READY = 1;
export const BATCH_EXHAUSTED = 2;

export class ProtocolError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProtocolError";
  }
}

const MAX_SAFE = BigInt(Number.MAX_SAFE_INTEGER);

export class Writer {
  private buf = new Uint8Array(256);
  private len = 0;

  private grow(extra: number): void {
    if (this.len + extra <= this.buf.length) return;
    let size = this.buf.length * 2;
    while (size < this.len + extra) size *= 2;
    const next = new Uint8Array(size);
    next.set(this.buf.subarray(0, this.len));
    this.buf = next;
  }

  u8(value: number): void {
    if (!Number.isInteger(value) || value < 0 || value > 0xff) {
      throw new ProtocolError(`u8 out of range: ${value}`);
    }
    this.grow(1);
    this.buf[this.len++] = value;
  }

  u32(value: number): void {
    if (!Number.isInteger(value) || value < 0 || value > 0xffffffff) {
      throw new ProtocolError(`u32 out of range: ${value}`);
    }
    this.grow(4);
    new DataView(this.buf.buffer).setUint32(this.len, value);
    this.len += 4;
  }

  u64(value: number): void {
    if (!Number.isInteger(value) || value < 0 || value > Number.MAX_SAFE_INTEGER) {
      throw new ProtocolError(`u64 out of range: ${value}`);
    }
    this.grow(8);
    new DataView(this.buf.buffer).setBigUint64(this.len, BigInt(value));
    this.len += 8;
  }

  string(value: string): void {
    const raw = new TextEncoder().encode(value);
    if (raw.length > 0xffff) {
      throw new ProtocolError(`string too long: ${raw.length} bytes`);
    }
    this.grow(2 + raw.length);
    new DataView(this.buf.buffer).setUint16(this.len, raw.length);
    this.len += 2;
    this.buf.set(raw, this.len);
    this.len += raw.length;
  }

  blob(value: Uint8Array): void {
    this.u32(value.length);
    this.grow(value.length);
    this.buf.set(value, this.len);
    this.len += value.length;
  }

  getValue(): Uint8Array {
    return this.buf.slice(0, this.len);
  }
}

export class Reader {
  private pos = 0;
  private view: DataView;

  constructor(private data: Uint8Array) {
    this.view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  }

  get remaining(): number {
    return this.data.length - this.pos;
  }

  private need(n: number): void {
    if (this.remaining < n) {
      throw new ProtocolError(
        `truncated frame: wanted ${n} bytes, ${this.remaining} left`,
      );
    }
  }

  u8(): number {
    this.need(1);
    return this.data[this.pos++]!;
  }

  u32(): number {
    this.need(4);
    const value = this.view.getUint32(this.pos);
    this.pos += 4;
    return value;
  }

  u64(): number {
    this.need(8);
    const value = this.view.getBigUint64(this.pos);
    this.pos += 8;
    if (value > MAX_SAFE) {
      throw new ProtocolError(`u64 ${value} exceeds the safe integer range`);
    }
    return Number(value);
  }

  string(): string {
    this.need(2);
    const length = this.view.getUint16(this.pos);
    this.pos += 2;
    this.need(length);
    const raw = this.data.subarray(this.pos, this.pos + length);
    this.pos += length;
    try {
      return new TextDecoder("utf-8", { fatal: true }).decode(raw);
    } catch {
      throw new ProtocolError("invalid UTF-8 in string");
    }
  }

  blob(): Uint8Array {
    const length = this.u32();
    this.need(length);
    const raw = this.data.slice(this.pos, this.pos + length);
    this.pos += length;
    return raw;
  }

  // list length header, sanity-checked against the bytes left
  count(minElementSize: number): number {
    const n = this.u32();
    if (n * minElementSize > this.remaining) {
      throw new ProtocolError(
        `list count ${n} impossible with ${this.remaining} bytes left`,
      );
    }
    return n;
  }

  expectEnd(): void {
    if (this.remaining) {
      throw new ProtocolError(`${this.remaining} trailing bytes after message`);
    }
  }
}

export type Group = [rows: number[], columns: string[]];
export type CellEntry = [row: number, column: string, value: Uint8Array];

export interface Put {
  type: "Put";
  entries: CellEntry[];
}
export interface Get {
  type: "Get";
  rows: number[];
  columns: string[];
}
export interface RegisterController {
  type: "RegisterController";
  endpoint: string;
}
export interface ResetStorageEpoch {
  type: "ResetStorageEpoch";
  epoch: number;
  owned_rows: number[];
}
export interface Notify {
  type: "Notify";
  unit_id: number;
  epoch: number;
  groups: Group[];
}
export interface RequestBatch {
  type: "RequestBatch";
  task: string;
  consumer: string;
  micro_batch: number;
  policy: number;
  token_counts: [row: number, count: number][];
}
export interface ResetControllerEpoch {
  type: "ResetControllerEpoch";
  task: string;
  epoch: number;
  total_rows: number;
}
export interface PutPrompts {
  type: "PutPrompts";
  prompts: Uint8Array[];
}
export interface GetExperience {
  type: "GetExperience";
  task: string;
  consumer: string;
  micro_batch: number;
}
export interface WriteBack {
  type: "WriteBack";
  task: string;
  column: string;
  rows: number[];
  values: Uint8Array[];
}
export interface WeightSync {
  type: "WeightSync";
  version: number;
  payload: Uint8Array;
}
export interface TransferComplete {
  type: "TransferComplete";
}
export interface MaySwap {
  type: "MaySwap";
  instance: string;
}
export interface SwapFinished {
  type: "SwapFinished";
  instance: string;
}
export interface CoordStatus {
  type: "CoordStatus";
}
export interface Ack {
  type: "Ack";
  count: number;
}
export interface Cells {
  type: "Cells";
  cells: CellEntry[];
}
export interface Snapshot {
  type: "Snapshot";
  groups: Group[];
}
export interface BatchGrant {
  type: "BatchGrant";
  status: number;
  epoch: number;
  task: string;
  rows: number[];
  columns: string[];
  locations: [row: number, unit: number][];
  issued_to: string;
}
export interface ErrorReply {
  type: "ErrorReply";
  code: string;
  message: string;
}
export interface Experience {
  type: "Experience";
  status: number;
  epoch: number;
  rows: number[];
  columns: string[];
  cells: CellEntry[];
}
export interface BoolReply {
  type: "BoolReply";
  value: boolean;
}
export interface CoordStatusReply {
  type: "CoordStatusReply";
  trainer_version: number;
  instance_versions: [instance: string, version: number][];
}

export type Message =
  | Put
  | Get
  | RegisterController
  | ResetStorageEpoch
  | Notify
  | RequestBatch
  | ResetControllerEpoch
  | PutPrompts
  | GetExperience
  | WriteBack
  | WeightSync
  | TransferComplete
  | MaySwap
  | SwapFinished
  | CoordStatus
  | Ack
  | Cells
  | Snapshot
  | BatchGrant
  | ErrorReply
  | Experience
  | BoolReply
  | CoordStatusReply;

function writeRows(w: Writer, rows: number[]): void {
  w.u32(rows.length);
  for (const row of rows) w.u64(row);
}

function readRows(r: Reader): number[] {
  const n = r.count(8);
  const rows: number[] = [];
  for (let i = 0; i < n; i++) rows.push(r.u64());
  return rows;
}

function writeStrings(w: Writer, items: string[]): void {
  w.u32(items.length);
  for (const item of items) w.string(item);
}

function readStrings(r: Reader): string[] {
  const n = r.count(2);
  const items: string[] = [];
  for (let i = 0; i < n; i++) items.push(r.string());
  return items;
}

function writeGroups(w: Writer, groups: Group[]): void {
  w.u32(groups.length);
  for (const [rows, columns] of groups) {
    writeRows(w, rows);
    writeStrings(w, columns);
  }
}

function readGroups(r: Reader): Group[] {
  const n = r.count(8);
  const groups: Group[] = [];
  for (let i = 0; i < n; i++) groups.push([readRows(r), readStrings(r)]);
  return groups;
}

function writeCells(w: Writer, cells: CellEntry[]): void {
  w.u32(cells.length);
  for (const [row, column, value] of cells) {
    w.u64(row);
    w.string(column);
    w.blob(value);
  }
}

function readCells(r: Reader): CellEntry[] {
  const n = r.count(14);
  const cells: CellEntry[] = [];
  for (let i = 0; i < n; i++) cells.push([r.u64(), r.string(), r.blob()]);
  return cells;
}

function readStatus(r: Reader, what: string): number {
  const status = r.u8();
  if (
    status !== BATCH_OK &&
    status !== BATCH_NOT_READY &&
    status !== BATCH_EXHAUSTED
  ) {
    throw new ProtocolError(`unknown ${what} status byte ${status}`);
  }
  return status;
}

interface Codec {
  kind: number;
  encodeBody(w: Writer, m: Message): void;
  decodeBody(r: Reader): Message;
}

const CODECS: Record<Message["type"], Codec> = {
  Put: {
    kind: 0x01,
    encodeBody: (w, m) => writeCells(w, (m as Put).entries),
    decodeBody: (r) => ({ type: "Put", entries: readCells(r) }),
  },
  Get: {
    kind: 0x02,
    encodeBody: (w, m) => {
      writeRows(w, (m as Get).rows);
      writeStrings(w, (m as Get).columns);
    },
    decodeBody: (r) => ({ type: "Get", rows: readRows(r), columns: readStrings(r) }),
  },
  RegisterController: {
    kind: 0x03,
    encodeBody: (w, m) => w.string((m as RegisterController).endpoint),
    decodeBody: (r) => ({ type: "RegisterController", endpoint: r.string() }),
  },
  ResetStorageEpoch: {
    kind: 0x04,
    encodeBody: (w, m) => {
      w.u64((m as ResetStorageEpoch).epoch);
      writeRows(w, (m as ResetStorageEpoch).owned_rows);
    },
    decodeBody: (r) => ({
      type: "ResetStorageEpoch",
      epoch: r.u64(),
      owned_rows: readRows(r),
    }),
  },
  Notify: {
    kind: 0x05,
    encodeBody: (w, m) => {
      w.u32((m as Notify).unit_id);
      w.u64((m as Notify).epoch);
      writeGroups(w, (m as Notify).groups);
    },
    decodeBody: (r) => ({
      type: "Notify",
      unit_id: r.u32(),
      epoch: r.u64(),
      groups: readGroups(r),
    }),
  },
  RequestBatch: {
    kind: 0x06,
    encodeBody: (w, m) => {
      const req = m as RequestBatch;
      w.string(req.task);
      w.string(req.consumer);
      w.u32(req.micro_batch);
      w.u8(req.policy);
      w.u32(req.token_counts.length);
      for (const [row, count] of req.token_counts) {
        w.u64(row);
        w.u64(count);
      }
    },
    decodeBody: (r) => {
      const task = r.string();
      const consumer = r.string();
      const micro_batch = r.u32();
      const policy = r.u8();
      if (policy !== POLICY_FIFO && policy !== POLICY_TOKEN_BALANCED) {
        throw new ProtocolError(`unknown packing policy byte ${policy}`);
      }
      const n = r.count(16);
      const token_counts: [number, number][] = [];
      for (let i = 0; i < n; i++) token_counts.push([r.u64(), r.u64()]);
      if (policy === POLICY_FIFO && token_counts.length) {
        throw new ProtocolError("token counts present on a fifo request");
      }
      return { type: "RequestBatch", task, consumer, micro_batch, policy, token_counts };
    },
  },
  ResetControllerEpoch: {
    kind: 0x07,
    encodeBody: (w, m) => {
      const reset = m as ResetControllerEpoch;
      w.string(reset.task);
      w.u64(reset.epoch);
      w.u64(reset.total_rows);
    },
    decodeBody: (r) => ({
      type: "ResetControllerEpoch",
      task: r.string(),
      epoch: r.u64(),
      total_rows: r.u64(),
    }),
  },
  PutPrompts: {
    kind: 0x08,
    encodeBody: (w, m) => {
      const put = m as PutPrompts;
      w.u32(put.prompts.length);
      for (const prompt of put.prompts) w.blob(prompt);
    },
    decodeBody: (r) => {
      const n = r.count(4);
      const prompts: Uint8Array[] = [];
      for (let i = 0; i < n; i++) prompts.push(r.blob());
      return { type: "PutPrompts", prompts };
    },
  },
  GetExperience: {
    kind: 0x09,
    encodeBody: (w, m) => {
      const get = m as GetExperience;
      w.string(get.task);
      w.string(get.consumer);
      w.u32(get.micro_batch);
    },
    decodeBody: (r) => ({
      type: "GetExperience",
      task: r.string(),
      consumer: r.string(),
      micro_batch: r.u32(),
    }),
  },
  WriteBack: {
    kind: 0x0a,
    encodeBody: (w, m) => {
      const write = m as WriteBack;
      w.string(write.task);
      w.string(write.column);
      writeRows(w, write.rows);
      w.u32(write.values.length);
      for (const value of write.values) w.blob(value);
    },
    decodeBody: (r) => {
      const task = r.string();
      const column = r.string();
      const rows = readRows(r);
      const n = r.count(4);
      const values: Uint8Array[] = [];
      for (let i = 0; i < n; i++) values.push(r.blob());
      return { type: "WriteBack", task, column, rows, values };
    },
  },
  WeightSync: {
    kind: 0x0b,
    encodeBody: (w, m) => {
      w.u64((m as WeightSync).version);
      w.blob((m as WeightSync).payload);
    },
    decodeBody: (r) => ({ type: "WeightSync", version: r.u64(), payload: r.blob() }),
  },
  TransferComplete: {
    kind: 0x0c,
    encodeBody: () => {},
    decodeBody: () => ({ type: "TransferComplete" }),
  },
  MaySwap: {
    kind: 0x0d,
    encodeBody: (w, m) => w.string((m as MaySwap).instance),
    decodeBody: (r) => ({ type: "MaySwap", instance: r.string() }),
  },
  SwapFinished: {
    kind: 0x0e,
    encodeBody: (w, m) => w.string((m as SwapFinished).instance),
    decodeBody: (r) => ({ type: "SwapFinished", instance: r.string() }),
  },
  CoordStatus: {
    kind: 0x0f,
    encodeBody: () => {},
    decodeBody: () => ({ type: "CoordStatus" }),
  },
  Ack: {
    kind: 0x81,
    encodeBody: (w, m) => w.u64((m as Ack).count),
    decodeBody: (r) => ({ type: "Ack", count: r.u64() }),
  },
  Cells: {
    kind: 0x82,
    encodeBody: (w, m) => writeCells(w, (m as Cells).cells),
    decodeBody: (r) => ({ type: "Cells", cells: readCells(r) }),
  },
  Snapshot: {
    kind: 0x83,
    encodeBody: (w, m) => writeGroups(w, (m as Snapshot).groups),
    decodeBody: (r) => ({ type: "Snapshot", groups: readGroups(r) }),
  },
  BatchGrant: {
    kind: 0x84,
    encodeBody: (w, m) => {
      const grant = m as BatchGrant;
      w.u8(grant.status);
      if (grant.status !== BATCH_OK) return;
      w.u64(grant.epoch);
      w.string(grant.task);
      writeRows(w, grant.rows);
      writeStrings(w, grant.columns);
      w.u32(grant.locations.length);
      for (const [row, unit] of grant.locations) {
        w.u64(row);
        w.u32(unit);
      }
      w.string(grant.issued_to);
    },
    decodeBody: (r) => {
      const status = readStatus(r, "batch");
      if (status !== BATCH_OK) return emptyGrant(status);
      const epoch = r.u64();
      const task = r.string();
      const rows = readRows(r);
      const columns = readStrings(r);
      const n = r.count(12);
      const locations: [number, number][] = [];
      for (let i = 0; i < n; i++) locations.push([r.u64(), r.u32()]);
      const issued_to = r.string();
      return { type: "BatchGrant", status, epoch, task, rows, columns, locations, issued_to };
    },
  },
  ErrorReply: {
    kind: 0x85,
    encodeBody: (w, m) => {
      w.string((m as ErrorReply).code);
      w.string((m as ErrorReply).message);
    },
    decodeBody: (r) => ({ type: "ErrorReply", code: r.string(), message: r.string() }),
  },
  Experience: {
    kind: 0x86,
    encodeBody: (w, m) => {
      const exp = m as Experience;
      w.u8(exp.status);
      if (exp.status !== BATCH_OK) return;
      w.u64(exp.epoch);
      writeRows(w, exp.rows);
      writeStrings(w, exp.columns);
      writeCells(w, exp.cells);
    },
    decodeBody: (r) => {
      const status = readStatus(r, "experience");
      if (status !== BATCH_OK) {
        return { type: "Experience", status, epoch: 0, rows: [], columns: [], cells: [] };
      }
      return {
        type: "Experience",
        status,
        epoch: r.u64(),
        rows: readRows(r),
        columns: readStrings(r),
        cells: readCells(r),
      };
    },
  },
  BoolReply: {
    kind: 0x87,
    encodeBody: (w, m) => w.u8((m as BoolReply).value ? 1 : 0),
    decodeBody: (r) => {
      const raw = r.u8();
      if (raw !== 0 && raw !== 1) {
        throw new ProtocolError(`bool byte must be 0 or 1, got ${raw}`);
      }
      return { type: "BoolReply", value: raw === 1 };
    },
  },
  CoordStatusReply: {
    kind: 0x88,
    encodeBody: (w, m) => {
      const status = m as CoordStatusReply;
      w.u64(status.trainer_version);
      w.u32(status.instance_versions.length);
      for (const [instance, version] of status.instance_versions) {
        w.string(instance);
        w.u64(version);
      }
    },
    decodeBody: (r) => {
      const trainer_version = r.u64();
      const n = r.count(10);
      const instance_versions: [string, number][] = [];
      for (let i = 0; i < n; i++) instance_versions.push([r.string(), r.u64()]);
      return { type: "CoordStatusReply", trainer_version, instance_versions };
    },
  },
};

export function emptyGrant(status: number): BatchGrant {
  return {
    type: "BatchGrant",
    status,
    epoch: 0,
    task: "",
    rows: [],
    columns: [],
    locations: [],
    issued_to: "",
  };
}

const BY_KIND = new Map<number, Codec>(
  Object.values(CODECS).map((codec) => [codec.kind, codec]),
);

export function kindOf(type: Message["type"]): number {
  return CODECS[type].kind;
}

export const MESSAGE_TYPE_NAMES = Object.keys(CODECS) as Message["type"][];

export function encodeFrame(message: Message): Uint8Array {
  const w = new Writer();
  CODECS[message.type].encodeBody(w, message);
  const body = w.getValue();
  const length = 1 + body.length;
  if (length > MAX_FRAME) {
    throw new ProtocolError(`frame of ${length} bytes exceeds the ${MAX_FRAME} cap`);
  }
  const frame = new Uint8Array(4 + length);
  new DataView(frame.buffer).setUint32(0, length);
  frame[4] = CODECS[message.type].kind;
  frame.set(body, 5);
  return frame;
}

export function decodeMessage(kind: number, body: Uint8Array): Message {
  const codec = BY_KIND.get(kind);
  if (!codec) {
    throw new ProtocolError(`unknown message kind 0x${kind.toString(16).padStart(2, "0")}`);
  }
  const reader = new Reader(body);
  const message = codec.decodeBody(reader);
  reader.expectEnd();
  return message;
}

// decode one complete frame (prefix included); strict about length
export function decodeFrame(data: Uint8Array): Message {
  if (data.length < 5) {
    throw new ProtocolError(`frame too short: ${data.length} bytes`);
  }
  const length = new DataView(data.buffer, data.byteOffset).getUint32(0);
  if (length !== data.length - 4) {
    throw new ProtocolError(
      `length prefix ${length} does not match ${data.length - 4} framed bytes`,
    );
  }
  if (length > MAX_FRAME) {
    throw new ProtocolError(`frame of ${length} bytes exceeds the ${MAX_FRAME} cap`);
  }
  return decodeMessage(data[4]!, data.subarray(5));
}

// Incremental frame splitter for a byte stream: feed chunks as they
// arrive, pull complete messages out. Throws ProtocolError on an
// oversized or undersized declared length, like the server side.
export class FrameDecoder {
  private chunks: Uint8Array[] = [];
  private buffered = 0;

  feed(chunk: Uint8Array): Message[] {
    this.chunks.push(chunk);
    this.buffered += chunk.length;
    const out: Message[] = [];
    for (;;) {
      const message = this.tryNext();
      if (message === null) break;
      out.push(message);
    }
    return out;
  }

  private compact(): Uint8Array {
    if (this.chunks.length === 1) return this.chunks[0]!;
    const whole = new Uint8Array(this.buffered);
    let at = 0;
    for (const chunk of this.chunks) {
      whole.set(chunk, at);
      at += chunk.length;
    }
    this.chunks = [whole];
    return whole;
  }

  private tryNext(): Message | null {
    if (this.buffered < 4) return null;
    const data = this.compact();
    const length = new DataView(data.buffer, data.byteOffset).getUint32(0);
    if (length < 1) {
      throw new ProtocolError("frame length must cover the kind byte");
    }
    if (length > MAX_FRAME) {
      throw new ProtocolError(`frame of ${length} bytes exceeds the ${MAX_FRAME} cap`);
    }
    if (this.buffered < 4 + length) return null;
    const message = decodeMessage(data[4]!, data.subarray(5, 4 + length));
    this.chunks = [data.slice(4 + length)];
    this.buffered -= 4 + length;
    return message;
  }
}
