import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // every operation crosses a subprocess boundary
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
