// Session state for the steering workflow: one loaded document, an editable
// chain, and an append-only history of generation snapshots.

import { ChainEntry, chainBudget, countTokens } from "./budget.js";
import { EntitiesResponse, HistoryExport, Snapshot, SummaryResponse } from "./schema.js";

export interface ChainItem extends ChainEntry {
  hallucinated: boolean | null; // null until the service has reported on it
}

export interface SessionState {
  source: string;
  chain: ChainItem[];
  history: Snapshot[];
  entityChainCap: number;
  generating: boolean;
}

export function newSession(entityChainCap: number): SessionState {
  return { source: "", chain: [], history: [], entityChainCap, generating: false };
}

export function loadDocument(
  state: SessionState,
  source: string,
  response: EntitiesResponse,
): SessionState {
  const chain = response.chain.map((entity, i) => ({
    entity,
    hallucinated: response.hallucinated[i],
    tokenCount: response.token_counts[i],
  }));
  // History belongs to the previous document; a new load starts fresh.
  return { ...state, source, chain, history: [], generating: false };
}

export function addEntity(state: SessionState, entity: string): SessionState {
  const trimmed = entity.trim();
  if (!trimmed || state.chain.some((c) => c.entity === trimmed)) return state;
  const item: ChainItem = { entity: trimmed, hallucinated: null, tokenCount: countTokens(trimmed) };
  return { ...state, chain: [...state.chain, item] };
}

export function removeEntity(state: SessionState, index: number): SessionState {
  return { ...state, chain: state.chain.filter((_, i) => i !== index) };
}

export function moveEntity(state: SessionState, index: number, delta: -1 | 1): SessionState {
  const target = index + delta;
  if (target < 0 || target >= state.chain.length) return state;
  const chain = [...state.chain];
  [chain[index], chain[target]] = [chain[target], chain[index]];
  return { ...state, chain };
}

export function pruneHallucinated(state: SessionState): SessionState {
  // Removes exactly the badged entities; unknown flags are conservatively kept.
  return { ...state, chain: state.chain.filter((c) => c.hallucinated !== true) };
}

export function budgetUsed(state: SessionState): number {
  return chainBudget(state.chain);
}

export function budgetOk(state: SessionState): boolean {
  return budgetUsed(state) <= state.entityChainCap;
}

export function recordGeneration(
  state: SessionState,
  response: SummaryResponse,
  label: string,
): SessionState {
  const snapshot: Snapshot = {
    index: state.history.length,
    chain: response.chain_used,
    summary: response.summary,
    perEntityPresent: response.per_entity_present,
    chainHallucinated: response.chain_hallucinated,
    label,
  };
  // Refresh editor flags/counts from the authoritative response.
  const chain = response.chain_used.map((entity, i) => ({
    entity,
    hallucinated: response.chain_hallucinated[i],
    tokenCount: response.token_counts[i],
  }));
  return {
    ...state,
    chain,
    history: [...state.history, snapshot],
    generating: false,
  };
}

export function snapshotSuccess(snapshot: Snapshot): boolean {
  return snapshot.perEntityPresent.every(Boolean);
}

export function exportHistory(state: SessionState): HistoryExport {
  return { source: state.source, snapshots: state.history };
}
