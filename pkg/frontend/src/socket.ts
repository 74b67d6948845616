// Reconnecting WebSocket wrapper. The socket constructor is injectable so
// tests (and node, which lacks a global WebSocket) can supply their own.

import { Backoff } from "./backoff.js";
import type { LiveEvent } from "./types.js";

export const CLOSE_UNAUTHORIZED = 4401;
export const CLOSE_OVERFLOW = 4008;

// Structural adapter over browser WebSocket, ws, and test fakes; handler
// parameter types are loose on purpose so all three assign cleanly.
export interface WebSocketLike {
  // eslint-disable-next-line @typescript-eslint/no-explicit-any
  onopen: ((ev?: any) => void) | null;
  // eslint-disable-next-line @typescript-eslint/no-explicit-any
  onmessage: ((ev: { data: any }) => void) | null;
  onclose: ((ev: { code?: number }) => void) | null;
  // eslint-disable-next-line @typescript-eslint/no-explicit-any
  onerror: ((ev?: any) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => WebSocketLike;

export interface LiveSocketHandler {
  onEvent(event: LiveEvent): void;
  onConnectionChange(connected: boolean): void;
  onAuthFailure(): void;
}

export class LiveSocket {
  private socket: WebSocketLike | null = null;
  private backoff = new Backoff();
  private stopped = false;
  private reconnectTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private url: string,
    private handler: LiveSocketHandler,
    private factory: SocketFactory,
  ) {}

  connect(): void {
    if (this.stopped) return;
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.onopen = () => {
      this.backoff.reset();
      this.handler.onConnectionChange(true);
    };
    socket.onmessage = (ev) => {
      try {
        this.handler.onEvent(JSON.parse(String(ev.data)) as LiveEvent);
      } catch {
        // Non-JSON frames are not ours to crash on.
      }
    };
    socket.onclose = (ev) => {
      this.handler.onConnectionChange(false);
      if (this.stopped) return;
      if (ev.code === CLOSE_UNAUTHORIZED) {
        this.handler.onAuthFailure();
        return; // do not hammer a gateway that rejected the token
      }
      this.scheduleReconnect();
    };
    socket.onerror = () => {
      // onclose follows; nothing to do here
    };
  }

  private scheduleReconnect(): void {
    if (this.reconnectTimer !== null) return;
    const delay = this.backoff.nextDelayMs();
    this.reconnectTimer = setTimeout(() => {
      this.reconnectTimer = null;
      this.connect();
    }, delay);
  }

  close(): void {
    this.stopped = true;
    if (this.reconnectTimer !== null) {
      clearTimeout(this.reconnectTimer);
      this.reconnectTimer = null;
    }
    this.socket?.close();
  }
}
