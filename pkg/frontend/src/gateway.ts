// Thin REST client for the gateway API. fetch is injectable for tests.

import type { NodeStatusRow, TokenInfo } from "./types.js";

export interface GatewayConfig {
  baseUrl: string; // e.g. http://127.0.0.1:8080
  token: string;
}

export class GatewayError extends Error {
  constructor(
    readonly status: number,
    readonly body: string,
  ) {
    super(`gateway returned ${status}: ${body}`);
  }
}

type FetchLike = typeof fetch;

export class GatewayClient {
  constructor(
    private config: GatewayConfig,
    private fetchImpl: FetchLike = fetch,
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const response = await this.fetchImpl(`${this.config.baseUrl}${path}`, {
      method,
      headers: {
        Authorization: `Bearer ${this.config.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await response.text();
    if (!response.ok) {
      throw new GatewayError(response.status, text);
    }
    return text ? JSON.parse(text) : null;
  }

  tokenInfo(): Promise<TokenInfo> {
    return this.request("GET", "/api/v1/token") as Promise<TokenInfo>;
  }

  async experiments(): Promise<string[]> {
    const out = (await this.request("GET", "/api/v1/experiments")) as {
      experiments: string[];
    };
    return out.experiments;
  }

  async pipelineStatus(): Promise<NodeStatusRow[]> {
    const out = (await this.request("GET", "/api/v1/pipeline/status")) as {
      nodes: NodeStatusRow[];
    };
    return out.nodes;
  }

  async postControl(
    experiment: string,
    device: string,
    commandName: string,
    params: Record<string, number | string | boolean>,
  ): Promise<number> {
    const out = (await this.request(
      "POST",
      `/api/v1/experiments/${experiment}/control/${device}`,
      { command_name: commandName, params },
    )) as { seq: number };
    return out.seq;
  }

  wsUrl(experiment: string, channels: string[]): string {
    const ws = this.config.baseUrl.replace(/^http/, "ws");
    const chan = encodeURIComponent(channels.join(","));
    const token = encodeURIComponent(this.config.token);
    return `${ws}/api/v1/ws?experiment=${experiment}&channels=${chan}&token=${token}`;
  }
}
