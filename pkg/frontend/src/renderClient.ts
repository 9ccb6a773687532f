/** Render-request scheduler: throttled issue rate, a single in-flight
 *  request with latest-state-wins replacement, and monotone request ids
 *  so a response that is no longer the newest is dropped instead of
 *  overwriting a fresher image. */

import { ControlState } from "./state.js";
import { RenderRequestBody, toRenderRequest } from "./request.js";

export interface RenderResult {
  blob: Blob;
}

/** Transport hook; the browser app posts over HTTP, tests inject fakes. */
export type Poster = (body: RenderRequestBody) => Promise<RenderResult>;

export interface RenderDelivery {
  blob: Blob;
  latencyMs: number;
  id: number;
}

export interface RenderClientOptions {
  /** Minimum interval between issued requests (leading edge fires
   *  immediately; trailing edge guarantees the final state renders). */
  debounceMs?: number;
  /** After this long an in-flight request no longer blocks newer ones;
   *  if its response still arrives it is discarded as stale. */
  timeoutMs?: number;
  onImage?: (delivery: RenderDelivery) => void;
  onError?: (message: string) => void;
  /** Fires with the number of requests currently awaited (0 or 1). */
  onBusy?: (inFlight: number) => void;
  now?: () => number;
}

export interface RenderClient {
  /** Schedule a render of this state; newer calls supersede older ones. */
  request(state: ControlState): void;
  /** Render immediately, bypassing the debounce window (still respects
   *  the single-flight rule). */
  flush(state: ControlState): void;
  dispose(): void;
  readonly stats: { issued: number; delivered: number; discarded: number };
}

export function createRenderClient(post: Poster, options: RenderClientOptions = {}): RenderClient {
  const debounceMs = options.debounceMs ?? 150;
  const timeoutMs = options.timeoutMs ?? 30000;
  const now = options.now ?? (() => Date.now());

  let timer: ReturnType<typeof setTimeout> | null = null;
  let pending: ControlState | null = null;
  let inFlightId: number | null = null;
  let newestIssuedId = 0;
  let lastDeliveredId = 0;
  let lastIssueTime = -Infinity;
  let disposed = false;
  const stats = { issued: 0, delivered: 0, discarded: 0 };

  function setBusy() {
    options.onBusy?.(inFlightId === null ? 0 : 1);
  }

  function issue(state: ControlState) {
    const id = ++newestIssuedId;
    inFlightId = id;
    lastIssueTime = now();
    stats.issued += 1;
    setBusy();
    const started = now();
    const guard = setTimeout(() => {
      if (inFlightId === id) {
        inFlightId = null;
        setBusy();
        options.onError?.("render request timed out");
        drainPending();
      }
    }, timeoutMs);
    post(toRenderRequest(state)).then(
      (result) => {
        clearTimeout(guard);
        settle(id);
        if (id > lastDeliveredId && id === newestIssuedId) {
          lastDeliveredId = id;
          stats.delivered += 1;
          options.onImage?.({ blob: result.blob, latencyMs: now() - started, id });
        } else {
          stats.discarded += 1;
        }
        drainPending();
      },
      (err) => {
        clearTimeout(guard);
        settle(id);
        if (id === newestIssuedId) {
          options.onError?.(err instanceof Error ? err.message : String(err));
        } else {
          stats.discarded += 1;
        }
        drainPending();
      },
    );
  }

  function settle(id: number) {
    if (inFlightId === id) {
      inFlightId = null;
      setBusy();
    }
  }

  function drainPending() {
    if (disposed || pending === null || inFlightId !== null) return;
    const state = pending;
    pending = null;
    issue(state);
  }

  function fire(state: ControlState) {
    if (inFlightId !== null) {
      pending = state; // latest state wins; issued when the flight settles
      return;
    }
    issue(state);
  }

  return {
    request(state: ControlState) {
      if (disposed) return;
      const wait = lastIssueTime + debounceMs - now();
      if (timer === null && wait <= 0) {
        fire(state); // leading edge: idle panel renders immediately
        return;
      }
      pending = null;
      if (timer !== null) clearTimeout(timer);
      timer = setTimeout(() => {
        timer = null;
        fire(state);
      }, debounceMs);
    },
    flush(state: ControlState) {
      if (disposed) return;
      if (timer !== null) {
        clearTimeout(timer);
        timer = null;
      }
      fire(state);
    },
    dispose() {
      disposed = true;
      pending = null;
      if (timer !== null) clearTimeout(timer);
      timer = null;
    },
    stats,
  };
}
