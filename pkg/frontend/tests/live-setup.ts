// Global setup for the live smoke test: builds a small fixture checkpoint via
// the Python CLI (cached across runs) and serves it on a local port.

import { spawn, spawnSync } from "node:child_process";
import { existsSync, mkdirSync, writeFileSync } from "node:fs";
import { join, resolve } from "node:path";

const ROOT = resolve(__dirname, "..");
const CACHE = join(ROOT, ".cache");
const CORPUS = join(CACHE, "fixture.jsonl");
const PRE = join(CACHE, "fixture_pre.ckpt");
const TUNED_E = join(CACHE, "fixture_e.ckpt");
const TUNED = join(CACHE, "fixture.ckpt");
const SETTINGS = join(CACHE, "settings.json");
const PORT = 8899;

let server: ReturnType<typeof spawn> | null = null;

function py(args: string[], label: string) {
  const result = spawnSync("python3", ["-m", "promptsum.cli", ...args], {
    cwd: ROOT,
    stdio: "pipe",
    timeout: 600_000,
  });
  if (result.status !== 0) {
    throw new Error(`${label} failed: ${result.stderr?.toString() ?? "unknown"}`);
  }
}

async function waitForHealth(base: string, tries = 60): Promise<void> {
  for (let i = 0; i < tries; i++) {
    try {
      const resp = await fetch(base + "/health");
      if (resp.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error("service did not become healthy");
}

export default async function setup() {
  if (!process.env.PROMPTSUM_LIVE) {
    return () => {};
  }
  mkdirSync(CACHE, { recursive: true });
  if (!existsSync(TUNED)) {
    writeFileSync(SETTINGS, JSON.stringify({
      d_model: 32, n_heads: 2, n_enc_layers: 1, n_dec_layers: 1, d_ff: 64,
      prompt_len: 4, entity_chain_cap: 12, max_src_positions: 192,
      max_tgt_positions: 48, pretrain_epochs: 6, tune_epochs: 2,
      max_summary_len: 16, beam_width: 2,
    }));
    py(["synth", "--seed", "41", "--size", "40", "--out", CORPUS], "synth");
    py(["pretrain", "--corpus", CORPUS, "--out", PRE, "--epochs", "6",
        "--settings", SETTINGS], "pretrain");
    py(["tune-entity", "--checkpoint", PRE, "--corpus", CORPUS, "--out", TUNED_E,
        "--shots", "12", "--epochs", "2"], "tune-entity");
    py(["tune-summary", "--checkpoint", TUNED_E, "--corpus", CORPUS, "--out", TUNED,
        "--shots", "12", "--epochs", "2"], "tune-summary");
  }
  server = spawn("python3", ["-m", "promptsum.cli", "serve", "--checkpoint", TUNED,
                             "--port", String(PORT)], { stdio: "ignore" });
  const base = `http://127.0.0.1:${PORT}`;
  await waitForHealth(base);
  process.env.PROMPTSUM_API = base;
  process.env.PROMPTSUM_CORPUS = CORPUS;
  return () => {
    server?.kill("SIGKILL");
  };
}
