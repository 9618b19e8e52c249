import { z } from "zod";

// Response shapes of the inference service. The UI treats these as the single
// source of truth for chain parsing, hallucination flags, and presence ticks.

export const ModelInfoSchema = z.object({
  vocab_size: z.number().int(),
  d_model: z.number().int(),
  prompt_len: z.number().int(),
  entity_chain_cap: z.number().int(),
  max_source_chars: z.number().int(),
});
export type ModelInfo = z.infer<typeof ModelInfoSchema>;

export const EntitiesResponseSchema = z.object({
  chain: z.array(z.string()),
  hallucinated: z.array(z.boolean()),
  token_counts: z.array(z.number().int()),
  chain_parse_ok: z.boolean().optional(),
});
export type EntitiesResponse = z.infer<typeof EntitiesResponseSchema>;

export const SummaryResponseSchema = z.object({
  summary: z.string(),
  chain_used: z.array(z.string()),
  per_entity_present: z.array(z.boolean()),
  chain_hallucinated: z.array(z.boolean()),
  token_counts: z.array(z.number().int()),
  chain_truncated: z.boolean().optional(),
});
export type SummaryResponse = z.infer<typeof SummaryResponseSchema>;

export const SampleChainsResponseSchema = z.object({
  chains: z.array(z.array(z.string())),
});
export type SampleChainsResponse = z.infer<typeof SampleChainsResponseSchema>;

// A history snapshot records exactly the chain sent for that generation plus
// what the service returned; the export file is a list of these.
export const SnapshotSchema = z.object({
  index: z.number().int().nonnegative(),
  chain: z.array(z.string()),
  summary: z.string(),
  perEntityPresent: z.array(z.boolean()),
  chainHallucinated: z.array(z.boolean()),
  label: z.string(),
});
export type Snapshot = z.infer<typeof SnapshotSchema>;

export const HistoryExportSchema = z.object({
  source: z.string(),
  snapshots: z.array(SnapshotSchema),
});
export type HistoryExport = z.infer<typeof HistoryExportSchema>;
