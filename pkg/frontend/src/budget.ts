// Token budget accounting for the chain editor. Entity token counts come from
// the service when available; for entities the user just typed we mirror the
// service's word/number/punctuation split so the budget bar stays live. The
// split here is display/enforcement plumbing, not summarization logic: the
// server still enforces the cap and reports the chain it actually used.

const TOKEN_RE = /[A-Za-z]+(?:'[A-Za-z]+)*|\d+(?:[.,]\d+)*|[^\sA-Za-z\d]/g;

export function countTokens(entity: string): number {
  return (entity.match(TOKEN_RE) ?? []).length;
}

export interface ChainEntry {
  entity: string;
  tokenCount: number;
}

export function chainBudget(entries: ChainEntry[]): number {
  // Entities joined by one reserved separator token each.
  if (entries.length === 0) return 0;
  const tokens = entries.reduce((acc, e) => acc + e.tokenCount, 0);
  return tokens + (entries.length - 1);
}

export function withinBudget(entries: ChainEntry[], cap: number): boolean {
  return chainBudget(entries) <= cap;
}
