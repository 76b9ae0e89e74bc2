import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
    // the end-to-end test compiles the UI and runs a real rating service
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
