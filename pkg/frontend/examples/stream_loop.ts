// Minimal training-loop integration: iterate ready micro-batches from a
// running stack and write one result column back per batch.
//
// Start the servers first (see ../../configs/topology.yaml), then:
//   npx tsx examples/stream_loop.ts

import { connect } from "../src/index.js";

const session = await connect({
  controller: "127.0.0.1:7100",
  storage: { 0: "127.0.0.1:7101", 1: "127.0.0.1:7102" },
  task: "rollout",
  inputColumns: ["prompt"],
  microBatchSize: 4,
  pollIntervalMs: 10,
});

try {
  for await (const batch of session.iterate()) {
    const responses = batch.rows.map((row) => {
      const prompt = batch.value(row, "prompt");
      // stand-in for the actual model call
      return new TextEncoder().encode(`echo:${new TextDecoder().decode(prompt)}`);
    });
    const stored = await session.writeBack(batch.rows, "response", responses);
    console.log(`rows ${batch.rows.join(",")} -> ${stored} cells written`);
  }
  console.log("epoch exhausted");
} finally {
  session.close();
}
