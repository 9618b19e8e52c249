import {
  EntitiesResponse,
  EntitiesResponseSchema,
  ModelInfo,
  ModelInfoSchema,
  SampleChainsResponse,
  SampleChainsResponseSchema,
  SummaryResponse,
  SummaryResponseSchema,
} from "./schema.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function request<T>(
  base: string,
  path: string,
  parse: (raw: unknown) => T,
  body?: unknown,
): Promise<T> {
  const resp = await fetch(base + path, {
    method: body === undefined ? "GET" : "POST",
    headers: body === undefined ? {} : { "Content-Type": "application/json" },
    body: body === undefined ? undefined : JSON.stringify(body),
  });
  const payload = await resp.json();
  if (!resp.ok) {
    throw new ApiError(resp.status, String(payload?.error ?? resp.statusText));
  }
  return parse(payload);
}

export class Client {
  constructor(private base: string) {}

  health(): Promise<{ status: string }> {
    return request(this.base, "/health", (raw) => raw as { status: string });
  }

  modelInfo(): Promise<ModelInfo> {
    return request(this.base, "/model", (raw) => ModelInfoSchema.parse(raw));
  }

  entities(source: string): Promise<EntitiesResponse> {
    return request(this.base, "/entities", (raw) => EntitiesResponseSchema.parse(raw), {
      source,
    });
  }

  summary(source: string, chain: string[]): Promise<SummaryResponse> {
    return request(this.base, "/summary", (raw) => SummaryResponseSchema.parse(raw), {
      source,
      chain,
    });
  }

  sampleChains(source: string, opts: { k?: number; n?: number; seed?: number }): Promise<SampleChainsResponse> {
    return request(this.base, "/sample-chains", (raw) => SampleChainsResponseSchema.parse(raw), {
      source,
      ...opts,
    });
  }
}
