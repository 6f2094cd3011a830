// SDK conformance against live primary servers: a G=16 two-task epoch
// with exactly-once consumption, and a dump that must match the primary
// client running the identical script byte for byte.

import { ChildProcess, execFile, spawn } from "node:child_process";
import { mkdtempSync, rmSync, writeFileSync } from "node:fs";
import * as net from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { fileURLToPath } from "node:url";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { connect, Session } from "../src/client.js";
import { Connection } from "../src/connection.js";
import { BATCH_NOT_READY } from "../src/wire.js";

const execFileAsync = promisify(execFile);
const repoRoot = fileURLToPath(new URL("../..", import.meta.url));

const TOTAL_ROWS = 16;
const MICRO_BATCH = 4;
const HOST = "127.0.0.1";

const sleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));
const utf8 = (text: string) => new TextEncoder().encode(text);

function bytesToHex(bytes: Uint8Array): string {
  return [...bytes].map((b) => b.toString(16).padStart(2, "0")).join("");
}

function responseFor(row: number, prompt: Uint8Array): Uint8Array {
  const head = utf8(`resp/${row}/`);
  const out = new Uint8Array(head.length + prompt.length);
  out.set(head);
  out.set(prompt, head.length);
  return out;
}

async function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const server = net.createServer();
    server.on("error", reject);
    server.listen(0, HOST, () => {
      const port = (server.address() as net.AddressInfo).port;
      server.close(() => resolve(port));
    });
  });
}

async function waitForAccept(port: number, budgetMs = 20_000): Promise<void> {
  const deadline = Date.now() + budgetMs;
  for (;;) {
    const up = await new Promise<boolean>((resolve) => {
      const socket = net.connect(port, HOST);
      socket.once("connect", () => {
        socket.destroy();
        resolve(true);
      });
      socket.once("error", () => resolve(false));
    });
    if (up) return;
    if (Date.now() > deadline) throw new Error(`port ${port} never accepted`);
    await sleep(100);
  }
}

interface Stack {
  storagePorts: number[];
  controllerPort: number;
  procs: ChildProcess[];
  dir: string;
}

async function startStack(): Promise<Stack> {
  const storagePorts = [await freePort(), await freePort()];
  const controllerPort = await freePort();
  const dir = mkdtempSync(join(tmpdir(), "sdk-stack-"));
  const config = [
    "epoch: 1",
    `total_rows: ${TOTAL_ROWS}`,
    "tasks:",
    "  - name: rollout",
    "    inputs: [prompt]",
    "    outputs: [response]",
    "  - name: train",
    "    inputs: [prompt, response]",
    "storage:",
    ...storagePorts.map((p) => `  - ${HOST}:${p}`),
    `controller: ${HOST}:${controllerPort}`,
    "",
  ].join("\n");
  const configPath = join(dir, "topology.yaml");
  writeFileSync(configPath, config);

  const procs: ChildProcess[] = [];
  const serve = (args: string[]) => {
    const child = spawn("python3", ["-m", "flowline", ...args], {
      cwd: repoRoot,
      stdio: ["ignore", "pipe", "pipe"],
    });
    procs.push(child);
    return child;
  };
  serve(["serve-storage", configPath, "--unit-id", "0"]);
  serve(["serve-storage", configPath, "--unit-id", "1"]);
  for (const port of storagePorts) await waitForAccept(port);
  serve(["serve-controller", configPath]);
  await waitForAccept(controllerPort);
  return { storagePorts, controllerPort, procs, dir };
}

async function stopStack(stack: Stack): Promise<void> {
  await Promise.all(
    stack.procs.map(
      (proc) =>
        new Promise<void>((resolve) => {
          if (proc.exitCode !== null) return resolve();
          proc.once("exit", () => resolve());
          proc.kill("SIGINT");
          setTimeout(() => proc.kill("SIGKILL"), 5_000).unref();
        }),
    ),
  );
  rmSync(stack.dir, { recursive: true, force: true });
}

function sessionConfig(stack: Stack, task: string, inputColumns: string[], microBatch: number) {
  return {
    controller: `${HOST}:${stack.controllerPort}`,
    storage: Object.fromEntries(
      stack.storagePorts.map((port, unit) => [unit, `${HOST}:${port}`]),
    ),
    task,
    inputColumns,
    microBatchSize: microBatch,
    pollIntervalMs: 5,
  };
}

interface TaskDump {
  batches: number[][];
  cells: Record<string, string>;
}

async function drain(session: Session): Promise<{ dump: TaskDump; prompts: Map<number, Uint8Array> }> {
  const dump: TaskDump = { batches: [], cells: {} };
  const prompts = new Map<number, Uint8Array>();
  for await (const batch of session.iterate()) {
    dump.batches.push(batch.rows);
    for (const row of batch.rows) {
      for (const column of batch.columns) {
        dump.cells[`${row}/${column}`] = bytesToHex(batch.value(row, column));
        if (column === "prompt") prompts.set(row, batch.value(row, column));
      }
    }
  }
  return { dump, prompts };
}

describe("sdk conformance against a live primary stack", () => {
  let stack: Stack;

  beforeAll(async () => {
    stack = await startStack();
  });

  afterAll(async () => {
    if (stack) await stopStack(stack);
  });

  it("completes a G=16 two-task epoch matching the primary client byte for byte", async () => {
    const rollout = await connect(sessionConfig(stack, "rollout", ["prompt"], MICRO_BATCH));
    const train = await connect(
      sessionConfig(stack, "train", ["prompt", "response"], MICRO_BATCH),
    );
    try {
      // before any prompts the controller reports not-ready, not exhausted
      const probe = await rollout.callController({
        type: "RequestBatch",
        task: "rollout",
        consumer: "rollout/0",
        micro_batch: MICRO_BATCH,
        policy: 0,
        token_counts: [],
      });
      expect(probe.type).toBe("BatchGrant");
      if (probe.type === "BatchGrant") expect(probe.status).toBe(BATCH_NOT_READY);

      const prompts = Array.from({ length: TOTAL_ROWS }, (_, r) => utf8(`prompt-${r}`));
      const seeded = await rollout.callController({ type: "PutPrompts", prompts });
      expect(seeded).toEqual({ type: "Ack", count: TOTAL_ROWS });

      const writeAcks: number[] = [];
      const rolloutDump: TaskDump = { batches: [], cells: {} };
      for await (const batch of rollout.iterate()) {
        rolloutDump.batches.push(batch.rows);
        const values = batch.rows.map((row) => {
          const prompt = batch.value(row, "prompt");
          rolloutDump.cells[`${row}/prompt`] = bytesToHex(prompt);
          return responseFor(row, prompt);
        });
        writeAcks.push(await rollout.writeBack(batch.rows, "response", values));
      }

      const { dump: trainDump } = await drain(train);

      // exactly once: every row granted once per task, nothing twice
      for (const dump of [rolloutDump, trainDump]) {
        const rows = dump.batches.flat();
        expect(rows.length).toBe(TOTAL_ROWS);
        expect([...rows].sort((a, b) => a - b)).toEqual(
          Array.from({ length: TOTAL_ROWS }, (_, r) => r),
        );
      }
      expect(trainDump.batches.every((rows) => rows.length === MICRO_BATCH)).toBe(true);

      // train saw exactly the payloads the rollout side wrote
      for (let row = 0; row < TOTAL_ROWS; row++) {
        expect(trainDump.cells[`${row}/prompt`]).toBe(bytesToHex(utf8(`prompt-${row}`)));
        expect(trainDump.cells[`${row}/response`]).toBe(
          bytesToHex(responseFor(row, utf8(`prompt-${row}`))),
        );
      }

      // byte-identical to the primary client executing the same script
      const sdkDump = {
        micro_batch: MICRO_BATCH,
        rollout: rolloutDump,
        total_rows: TOTAL_ROWS,
        train: trainDump,
        write_acks: writeAcks,
      };
      const { stdout } = await execFileAsync(
        "python3",
        [
          join(repoRoot, "frontend", "scripts", "reference_epoch.py"),
          "--total-rows",
          String(TOTAL_ROWS),
          "--micro-batch",
          String(MICRO_BATCH),
        ],
        { cwd: repoRoot },
      );
      expect(sdkDump).toEqual(JSON.parse(stdout));
    } finally {
      rollout.close();
      train.close();
    }
  });

  it("yields exactly two batches for G=4 with micro-batch 2, then an empty stream", async () => {
    // move the whole stack to epoch 2 with four rows
    const controller = new Connection(HOST, stack.controllerPort);
    for (const task of ["rollout", "train"]) {
      const reply = await controller.call({
        type: "ResetControllerEpoch",
        task,
        epoch: 2,
        total_rows: 4,
      });
      expect(reply.type).toBe("Ack");
    }
    for (const [unit, port] of stack.storagePorts.entries()) {
      const storage = new Connection(HOST, port);
      const owned = [0, 1, 2, 3].filter((row) => row % stack.storagePorts.length === unit);
      const reply = await storage.call({ type: "ResetStorageEpoch", epoch: 2, owned_rows: owned });
      expect(reply.type).toBe("Ack");
      storage.close();
    }

    const session = await connect(sessionConfig(stack, "rollout", ["prompt"], 2));
    try {
      await session.callController({
        type: "PutPrompts",
        prompts: [utf8("a"), utf8("b"), utf8("c"), utf8("d")],
      });
      const batches: number[][] = [];
      for await (const batch of session.iterate()) {
        expect(batch.epoch).toBe(2);
        batches.push(batch.rows);
      }
      expect(batches.length).toBe(2);
      expect(batches.flat().sort((a, b) => a - b)).toEqual([0, 1, 2, 3]);

      // the epoch is spent: a fresh iterate terminates with no batches
      const again: number[][] = [];
      for await (const batch of session.iterate()) again.push(batch.rows);
      expect(again).toEqual([]);
    } finally {
      session.close();
      controller.close();
    }
  });
});
