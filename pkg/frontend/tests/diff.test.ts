import { describe, expect, it } from "vitest";

import { diffChains, diffTokens, isEmptyDiff } from "../src/diff.js";
import { chainBudget, countTokens } from "../src/budget.js";

describe("chain diff", () => {
  it("identical chains give an empty diff", () => {
    const diff = diffChains(["A", "B"], ["A", "B"]);
    expect(diff.added).toEqual([]);
    expect(diff.removed).toEqual([]);
    expect(diff.reordered).toBe(false);
  });

  it("disjoint chains are fully added and removed", () => {
    const diff = diffChains(["A", "B"], ["C"]);
    expect(diff.removed).toEqual(["A", "B"]);
    expect(diff.added).toEqual(["C"]);
  });

  it("detects pure reordering", () => {
    const diff = diffChains(["A", "B"], ["B", "A"]);
    expect(diff.added).toEqual([]);
    expect(diff.removed).toEqual([]);
    expect(diff.reordered).toBe(true);
  });
});

describe("summary token diff", () => {
  it("identical summaries produce an empty diff", () => {
    const ops = diffTokens("Alva visited the harbor.", "Alva visited the harbor.");
    expect(isEmptyDiff(ops)).toBe(true);
  });

  it("marks insertions and deletions around a common middle", () => {
    const ops = diffTokens("Alva visited the harbor", "Brix visited the mill");
    const del = ops.filter((o) => o.op === "del").map((o) => o.token);
    const ins = ops.filter((o) => o.op === "ins").map((o) => o.token);
    expect(del).toContain("Alva");
    expect(ins).toContain("Brix");
    expect(ops.filter((o) => o.op === "equal").map((o) => o.token)).toContain("visited");
  });

  it("reconstructs both sides from the op stream", () => {
    const before = "one two three four";
    const after = "two three five";
    const ops = diffTokens(before, after);
    const left = ops.filter((o) => o.op !== "ins").map((o) => o.token).join(" ");
    const right = ops.filter((o) => o.op !== "del").map((o) => o.token).join(" ");
    expect(left).toBe(before);
    expect(right).toBe(after);
  });
});

describe("budget", () => {
  it("splits words, numbers, and punctuation like the service tokenizer", () => {
    expect(countTokens("Alva")).toBe(1);
    expect(countTokens("Rio Verde")).toBe(2);
    expect(countTokens("49,000")).toBe(1);
    expect(countTokens("it's done.")).toBe(3);
  });

  it("adds one separator between adjacent entities", () => {
    const entries = [
      { entity: "Alva", tokenCount: 1 },
      { entity: "Rio Verde", tokenCount: 2 },
    ];
    expect(chainBudget(entries)).toBe(4);
    expect(chainBudget([])).toBe(0);
  });
});
