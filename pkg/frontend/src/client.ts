// Sequenced render client. One canvas, many rapid edits: requests are
// debounced, identical in-flight requests are not re-issued, and responses
// apply only when they belong to the newest issued request, so a slow older
// render can never overwrite a newer one.

import { debounce, Debounced, TimerHost } from "./debounce.js";
import { ViewerRequest, requestKey } from "./state.js";

export type FetchLike = (url: string, init: {
  method: string;
  headers: Record<string, string>;
  body: string;
}) => Promise<{
  ok: boolean;
  status: number;
  arrayBuffer(): Promise<ArrayBuffer>;
  json(): Promise<unknown>;
}>;

export interface ClientHooks {
  onImage(bytes: Uint8Array, req: ViewerRequest): void;
  onError?(message: string): void;
  onPending?(pending: boolean): void;
}

export interface ClientOptions {
  fetchFn?: FetchLike;
  debounceMs?: number;
  timers?: TimerHost;
}

function base64Bytes(b64: string): Uint8Array {
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export class RenderClient {
  readonly show: Debounced<[ViewerRequest]>;
  private lastSeq = 0;
  private inflight = new Map<string, number>();

  constructor(
    private base: string,
    private hooks: ClientHooks,
    opts: ClientOptions = {},
  ) {
    this.fetchFn = opts.fetchFn ?? ((url, init) => fetch(url, init));
    this.show = debounce(
      (req: ViewerRequest) => this.issue(req),
      opts.debounceMs ?? 100,
      opts.timers ?? globalThis,
    );
  }

  private fetchFn: FetchLike;

  /** Issue immediately, skipping the debounce (initial load, hash restore). */
  issue(req: ViewerRequest): void {
    const key = requestKey(req);
    const seq = ++this.lastSeq;
    if (this.inflight.has(key)) {
      // identical request already on the wire: adopt it as the newest issue
      this.inflight.set(key, seq);
      return;
    }
    this.inflight.set(key, seq);
    this.hooks.onPending?.(true);
    this.fetchFn(this.base + req.path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req.body),
    }).then(
      (resp) => this.settle(key, req, resp),
      (err) => this.fail(key, String(err)),
    );
  }

  private async settle(
    key: string,
    req: ViewerRequest,
    resp: Awaited<ReturnType<FetchLike>>,
  ): Promise<void> {
    let bytes: Uint8Array | null = null;
    let error: string | null = null;
    if (!resp.ok) {
      let detail = "";
      try {
        detail = JSON.stringify(((await resp.json()) as { detail?: unknown }).detail ?? "");
      } catch {
        detail = "";
      }
      error = `render failed (${resp.status}) ${detail}`;
    } else if (req.path === "/api/v1/interpolate") {
      const payload = (await resp.json()) as { frames: string[] };
      bytes = base64Bytes(payload.frames[0]);
    } else {
      bytes = new Uint8Array(await resp.arrayBuffer());
    }

    const seq = this.inflight.get(key);
    this.inflight.delete(key);
    this.hooks.onPending?.(this.inflight.size > 0);
    if (error !== null) {
      this.hooks.onError?.(error);
      return;
    }
    if (seq !== this.lastSeq) return; // superseded while on the wire
    this.hooks.onImage(bytes as Uint8Array, req);
  }

  private fail(key: string, message: string): void {
    this.inflight.delete(key);
    this.hooks.onPending?.(this.inflight.size > 0);
    this.hooks.onError?.(message);
  }
}
