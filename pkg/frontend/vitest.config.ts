import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the conformance test spawns real server processes
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
