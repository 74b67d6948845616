import { describe, expect, it, vi } from "vitest";

import { Backoff } from "../src/backoff.js";
import {
  CLOSE_UNAUTHORIZED,
  LiveSocket,
  type WebSocketLike,
} from "../src/socket.js";
import type { LiveEvent } from "../src/types.js";

class FakeSocket implements WebSocketLike {
  onopen: ((ev?: unknown) => void) | null = null;
  onmessage: ((ev: { data: unknown }) => void) | null = null;
  onclose: ((ev: { code?: number }) => void) | null = null;
  onerror: ((ev?: unknown) => void) | null = null;
  closed = false;

  close(): void {
    this.closed = true;
  }
}

function makeHandler() {
  const events: LiveEvent[] = [];
  const transitions: boolean[] = [];
  let authFailures = 0;
  return {
    events,
    transitions,
    authFailures: () => authFailures,
    handler: {
      onEvent: (e: LiveEvent) => events.push(e),
      onConnectionChange: (up: boolean) => transitions.push(up),
      onAuthFailure: () => {
        authFailures++;
      },
    },
  };
}

describe("Backoff", () => {
  it("doubles and caps", () => {
    const b = new Backoff(250, 2000);
    expect([b.nextDelayMs(), b.nextDelayMs(), b.nextDelayMs(), b.nextDelayMs(), b.nextDelayMs()])
      .toEqual([250, 500, 1000, 2000, 2000]);
    b.reset();
    expect(b.nextDelayMs()).toBe(250);
  });
});

describe("LiveSocket", () => {
  it("parses messages into LiveEvents", () => {
    const sockets: FakeSocket[] = [];
    const { events, handler } = makeHandler();
    const live = new LiveSocket("ws://x", handler, () => {
      const s = new FakeSocket();
      sockets.push(s);
      return s;
    });
    live.connect();
    sockets[0].onopen?.();
    sockets[0].onmessage?.({
      data: JSON.stringify({ channel: "data", experiment_id: "e1", ts_us: 1, body: {} }),
    });
    expect(events).toHaveLength(1);
    expect(events[0].channel).toBe("data");
    live.close();
  });

  it("reconnects with backoff after a drop and recovers", () => {
    vi.useFakeTimers();
    const sockets: FakeSocket[] = [];
    const { transitions, handler } = makeHandler();
    const live = new LiveSocket("ws://x", handler, () => {
      const s = new FakeSocket();
      sockets.push(s);
      return s;
    });
    live.connect();
    sockets[0].onopen?.();
    sockets[0].onclose?.({ code: 1006 });
    expect(sockets).toHaveLength(1);
    vi.advanceTimersByTime(300); // past the first 250ms backoff step
    expect(sockets).toHaveLength(2);
    sockets[1].onopen?.();
    expect(transitions).toEqual([true, false, true]);
    live.close();
    vi.useRealTimers();
  });

  it("4401 stops reconnecting and reports auth failure", () => {
    vi.useFakeTimers();
    const sockets: FakeSocket[] = [];
    const h = makeHandler();
    const live = new LiveSocket("ws://x", h.handler, () => {
      const s = new FakeSocket();
      sockets.push(s);
      return s;
    });
    live.connect();
    sockets[0].onclose?.({ code: CLOSE_UNAUTHORIZED });
    vi.advanceTimersByTime(60_000);
    expect(sockets).toHaveLength(1); // no retry against a bad token
    expect(h.authFailures()).toBe(1);
    live.close();
    vi.useRealTimers();
  });

  it("close() cancels pending reconnects", () => {
    vi.useFakeTimers();
    const sockets: FakeSocket[] = [];
    const { handler } = makeHandler();
    const live = new LiveSocket("ws://x", handler, () => {
      const s = new FakeSocket();
      sockets.push(s);
      return s;
    });
    live.connect();
    sockets[0].onclose?.({ code: 1006 });
    live.close();
    vi.advanceTimersByTime(60_000);
    expect(sockets).toHaveLength(1);
    vi.useRealTimers();
  });
});
