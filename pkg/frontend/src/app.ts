// DOM wiring for the steering workflow. All NLP decisions (chain prediction,
// hallucination flags, presence ticks) come from API responses; this file
// only renders state and forwards edits.

import { ApiError, Client } from "./api.js";
import { diffChains, diffTokens } from "./diff.js";
import { Snapshot } from "./schema.js";
import {
  SessionState,
  addEntity,
  budgetOk,
  budgetUsed,
  exportHistory,
  loadDocument,
  moveEntity,
  newSession,
  pruneHallucinated,
  recordGeneration,
  removeEntity,
  snapshotSuccess,
} from "./state.js";

const base = (window as any).PROMPTSUM_API ?? "http://127.0.0.1:8765";
const client = new Client(base);

let state: SessionState = newSession(100);
let pendingGeneration: Promise<void> | null = null;
let queuedRegenerate = false;
let compareSelection: number[] = [];

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function setBanner(text: string, isError = false) {
  const banner = el<HTMLDivElement>("banner");
  banner.textContent = text;
  banner.className = isError ? "banner error" : "banner";
  banner.style.display = text ? "block" : "none";
}

function entityMarkup(source: string, entities: string[]): string {
  let html = source.replace(/&/g, "&amp;").replace(/</g, "&lt;");
  for (const entity of [...entities].sort((a, b) => b.length - a.length)) {
    if (!entity) continue;
    const escaped = entity.replace(/[.*+?^${}()|[\]\\]/g, "\\$&");
    html = html.replace(new RegExp(`\\b${escaped}\\b`, "g"), `<mark>${entity}</mark>`);
  }
  return html;
}

function render() {
  el<HTMLDivElement>("source-view").innerHTML = entityMarkup(
    state.source,
    state.chain.map((c) => c.entity),
  );

  const chainBox = el<HTMLDivElement>("chain");
  chainBox.innerHTML = "";
  state.chain.forEach((item, i) => {
    const chip = document.createElement("span");
    chip.className = "chip" + (item.hallucinated === true ? " hallucinated" : "");
    chip.dataset.entity = item.entity;
    const label = document.createElement("span");
    label.textContent = item.entity;
    chip.appendChild(label);
    if (item.hallucinated === true) {
      const badge = document.createElement("span");
      badge.className = "badge";
      badge.title = "not found in the source";
      badge.textContent = "!";
      chip.appendChild(badge);
    }
    for (const [sym, action] of [
      ["←", () => moveEntity(state, i, -1)],
      ["→", () => moveEntity(state, i, 1)],
      ["×", () => removeEntity(state, i)],
    ] as const) {
      const btn = document.createElement("button");
      btn.textContent = sym;
      btn.onclick = () => {
        state = action();
        render();
      };
      chip.appendChild(btn);
    }
    chainBox.appendChild(chip);
  });

  const used = budgetUsed(state);
  const budget = el<HTMLDivElement>("budget");
  budget.textContent = `chain budget: ${used} / ${state.entityChainCap} tokens`;
  budget.className = budgetOk(state) ? "" : "over";
  el<HTMLButtonElement>("regenerate").disabled = !budgetOk(state) || !state.source;
  el<HTMLButtonElement>("regenerate-empty").disabled = !state.source;

  const historyBox = el<HTMLDivElement>("history");
  historyBox.innerHTML = "";
  state.history.forEach((snap) => {
    const card = document.createElement("div");
    card.className = "snapshot" + (compareSelection.includes(snap.index) ? " selected" : "");
    const title = document.createElement("div");
    title.className = "snap-title";
    title.textContent = `#${snap.index} ${snap.label} ` +
      (snapshotSuccess(snap) ? "— all entities present" : "— missing entities");
    card.appendChild(title);
    const chain = document.createElement("div");
    snap.chain.forEach((entity, i) => {
      const tick = document.createElement("span");
      tick.className = "tick " + (snap.perEntityPresent[i] ? "present" : "absent");
      tick.textContent = `${snap.perEntityPresent[i] ? "✓" : "✗"} ${entity}`;
      chain.appendChild(tick);
    });
    card.appendChild(chain);
    const text = document.createElement("p");
    text.textContent = snap.summary;
    card.appendChild(text);
    card.onclick = () => {
      compareSelection = compareSelection.includes(snap.index)
        ? compareSelection.filter((x) => x !== snap.index)
        : [...compareSelection.slice(-1), snap.index];
      render();
    };
    historyBox.appendChild(card);
  });

  renderCompare();
}

function renderCompare() {
  const box = el<HTMLDivElement>("compare");
  box.innerHTML = "";
  if (compareSelection.length < 2) {
    box.textContent = "select two snapshots to compare";
    return;
  }
  const [ai, bi] = compareSelection;
  const a = state.history[ai];
  const b = state.history[bi];
  const chainDiff = diffChains(a.chain, b.chain);
  const header = document.createElement("div");
  header.textContent =
    `chains #${ai} vs #${bi}: ` +
    (chainDiff.added.length || chainDiff.removed.length || chainDiff.reordered
      ? `added [${chainDiff.added.join(", ")}] removed [${chainDiff.removed.join(", ")}]` +
        (chainDiff.reordered ? " reordered" : "")
      : "identical");
  box.appendChild(header);
  const diffBox = document.createElement("p");
  for (const op of diffTokens(a.summary, b.summary)) {
    const span = document.createElement("span");
    span.className = op.op;
    span.textContent = op.token + " ";
    diffBox.appendChild(span);
  }
  box.appendChild(diffBox);
}

async function generate(chain: string[], label: string) {
  if (pendingGeneration) {
    queuedRegenerate = true;
    return;
  }
  state = { ...state, generating: true };
  setBanner("generating…");
  pendingGeneration = (async () => {
    try {
      const response = await client.summary(state.source, chain);
      state = recordGeneration(state, response, label);
      setBanner("");
    } catch (err) {
      state = { ...state, generating: false };
      setBanner(err instanceof ApiError ? err.message : "service unreachable — retry", true);
    } finally {
      pendingGeneration = null;
      render();
      if (queuedRegenerate) {
        queuedRegenerate = false;
        void generate(state.chain.map((c) => c.entity), "queued edit");
      }
    }
  })();
  await pendingGeneration;
}

async function onLoadDocument() {
  const source = el<HTMLTextAreaElement>("source-input").value;
  if (!source.trim()) {
    setBanner("enter a document first", true);
    return;
  }
  setBanner("tagging entities…");
  try {
    const response = await client.entities(source);
    state = loadDocument(state, source, response);
    compareSelection = [];
    setBanner("");
  } catch (err) {
    setBanner(err instanceof ApiError ? err.message : "service unreachable — retry", true);
  }
  render();
}

function onExport() {
  const payload = JSON.stringify(exportHistory(state), null, 2);
  const blob = new Blob([payload], { type: "application/json" });
  const a = document.createElement("a");
  a.href = URL.createObjectURL(blob);
  a.download = "steering-history.json";
  a.click();
  URL.revokeObjectURL(a.href);
}

export async function init() {
  try {
    const info = await client.modelInfo();
    state = newSession(info.entity_chain_cap);
    setBanner("");
  } catch {
    setBanner("service unreachable — start the API and reload", true);
  }
  el<HTMLButtonElement>("load").onclick = () => void onLoadDocument();
  el<HTMLButtonElement>("regenerate").onclick = () =>
    void generate(state.chain.map((c) => c.entity), "edited chain");
  el<HTMLButtonElement>("regenerate-empty").onclick = () =>
    void generate([], "no-plan baseline");
  el<HTMLButtonElement>("prune").onclick = () => {
    state = pruneHallucinated(state);
    render();
  };
  el<HTMLButtonElement>("add").onclick = () => {
    const input = el<HTMLInputElement>("add-input");
    state = addEntity(state, input.value);
    input.value = "";
    render();
  };
  el<HTMLButtonElement>("export").onclick = onExport;
  render();
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  void init();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", () => void init());
}
