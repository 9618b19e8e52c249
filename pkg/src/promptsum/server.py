"""HTTP inference API over one immutable checkpoint.

Endpoints (JSON in, JSON out):
  GET  /health         liveness
  GET  /model          config summary
  POST /entities       {source} -> predicted chain with hallucination flags
  POST /summary        {source, chain, gen_config?} -> summary + presence ticks
  POST /sample-chains  {source, k?, n?, seed?} -> sampled chains

Requests only read the checkpoint; a semaphore bounds concurrent decodes.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import metrics as X
from .checkpoint import Checkpoint, load_checkpoint
from .data import Document, EntityChain, detokenize, tokenize
from .decoding import GenConfig, generate_two_stage, predict_chain, sample_entity_chain
from .errors import DocumentSkipped, PromptSumError


class ApiError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


def _entity_payload(ckpt: Checkpoint, source_text: str, gen: GenConfig) -> dict:
    doc = Document(id="api", text=source_text)
    chain, parse_ok = predict_chain(ckpt, doc, gen)
    flags = [not X.entity_in_text(e, source_text) for e in chain.entities]
    token_counts = [len(tokenize(e)) for e in chain.entities]
    return {
        "chain": chain.entities,
        "hallucinated": flags,
        "token_counts": token_counts,
        "chain_parse_ok": parse_ok,
    }


def _summary_payload(ckpt: Checkpoint, source_text: str, chain_entities: list[str],
                     gen: GenConfig, include_prompt: bool = True) -> dict:
    doc = Document(id="api", text=source_text)
    override = EntityChain([str(e) for e in chain_entities])
    res = generate_two_stage(ckpt, doc, gen, chain_override=override,
                             include_summary_prompt=include_prompt)
    summary_text = detokenize(res.summary_tokens)
    present = [X.entity_in_text(e, summary_text) for e in res.chain.entities]
    return {
        "summary": summary_text,
        "chain_used": res.chain.entities,
        "per_entity_present": present,
        "chain_hallucinated": [not X.entity_in_text(e, source_text)
                               for e in res.chain.entities],
        "token_counts": [len(tokenize(e)) for e in res.chain.entities],
        "chain_truncated": res.chain.truncated,
    }


def _chains_payload(ckpt: Checkpoint, source_text: str, k: int | None,
                    n: int, seed: int) -> dict:
    doc = Document(id="api", text=source_text)
    try:
        if k is not None:
            chains = sample_entity_chain(doc, mode="random_k", k=k, seed=seed)
        else:
            chains = sample_entity_chain(doc, mode="random_chains", n=n, seed=seed)
    except DocumentSkipped as exc:
        raise ApiError(400, str(exc))
    return {"chains": [c.entities for c in chains]}


class InferenceService:
    """Request-independent wrapper so handlers stay trivial and testable."""

    def __init__(self, ckpt: Checkpoint, workers: int = 4,
                 max_source_chars: int = 20000, default_gen: GenConfig | None = None):
        self.ckpt = ckpt
        self.gate = threading.BoundedSemaphore(max(1, workers))
        self.max_source_chars = max_source_chars
        self.default_gen = default_gen or GenConfig(max_len=ckpt.config.max_tgt_positions - 1)

    def model_info(self) -> dict:
        cfg = self.ckpt.config
        return {
            "vocab_size": cfg.vocab_size,
            "d_model": cfg.d_model,
            "n_enc_layers": cfg.n_enc_layers,
            "n_dec_layers": cfg.n_dec_layers,
            "prompt_len": cfg.prompt_len,
            "entity_chain_cap": cfg.entity_chain_cap,
            "max_source_chars": self.max_source_chars,
            "provenance": self.ckpt.provenance,
        }

    def _source(self, body: dict) -> str:
        source = body.get("source")
        if not isinstance(source, str) or not source.strip():
            raise ApiError(400, "field 'source' must be a non-empty string")
        if len(source) > self.max_source_chars:
            raise ApiError(413, f"source exceeds {self.max_source_chars} characters")
        return source

    def _gen(self, body: dict) -> GenConfig:
        raw = body.get("gen_config")
        if raw is None:
            return self.default_gen
        if not isinstance(raw, dict):
            raise ApiError(400, "field 'gen_config' must be an object")
        try:
            return GenConfig.from_dict({**self.default_gen.to_dict(), **raw})
        except (PromptSumError, TypeError) as exc:
            raise ApiError(400, f"invalid gen_config: {exc}")

    def handle(self, route: str, body: dict) -> dict:
        with self.gate:
            if route == "/entities":
                return _entity_payload(self.ckpt, self._source(body), self._gen(body))
            if route == "/summary":
                chain = body.get("chain")
                if not isinstance(chain, list) or not all(isinstance(e, str) for e in chain):
                    raise ApiError(400, "field 'chain' must be a list of strings")
                return _summary_payload(self.ckpt, self._source(body), chain, self._gen(body))
            if route == "/sample-chains":
                k = body.get("k")
                if k is not None and (not isinstance(k, int) or k < 1):
                    raise ApiError(400, "field 'k' must be a positive integer")
                n = body.get("n", 10)
                if not isinstance(n, int) or n < 1:
                    raise ApiError(400, "field 'n' must be a positive integer")
                seed = body.get("seed", 0)
                if not isinstance(seed, int):
                    raise ApiError(400, "field 'seed' must be an integer")
                return _chains_payload(self.ckpt, self._source(body), k, n, seed)
            raise ApiError(404, f"unknown endpoint {route}")


def make_handler(service: InferenceService):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, payload: dict):
            raw = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(raw)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"status": "ok"})
            elif self.path == "/model":
                self._send(200, service.model_info())
            else:
                self._send(404, {"error": f"unknown endpoint {self.path}"})

        def do_POST(self):
            try:
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw.decode() or "{}")
                except (json.JSONDecodeError, UnicodeDecodeError):
                    raise ApiError(400, "request body is not valid JSON")
                if not isinstance(body, dict):
                    raise ApiError(400, "request body must be a JSON object")
                self._send(200, service.handle(self.path, body))
            except ApiError as exc:
                self._send(exc.status, {"error": exc.message})
            except Exception:
                self._send(500, {"error": "decode failure"})

    return Handler


def serve_api(checkpoint_path: str, host: str = "127.0.0.1", port: int = 8765,
              workers: int = 4, max_source_chars: int = 20000,
              ready_event: threading.Event | None = None) -> None:
    """Blocking server loop over a checkpoint loaded once at startup."""
    ckpt = load_checkpoint(checkpoint_path)
    service = InferenceService(ckpt, workers=workers, max_source_chars=max_source_chars)
    httpd = ThreadingHTTPServer((host, port), make_handler(service))
    print(f"serving checkpoint {checkpoint_path} on http://{host}:{port}")
    if ready_event is not None:
        ready_event.set()
    try:
        httpd.serve_forever()
    finally:
        httpd.server_close()


def start_background_server(checkpoint_path: str, host: str = "127.0.0.1",
                            port: int = 8765, workers: int = 4,
                            max_source_chars: int = 20000) -> ThreadingHTTPServer:
    """Non-blocking variant for tests; returns the server object."""
    ckpt = load_checkpoint(checkpoint_path)
    service = InferenceService(ckpt, workers=workers, max_source_chars=max_source_chars)
    httpd = ThreadingHTTPServer((host, port), make_handler(service))
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return httpd
