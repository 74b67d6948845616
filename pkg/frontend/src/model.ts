// Dashboard view-model: all state and event handling, no DOM. The render
// layer reads from here; tests drive it with fixture events.

import { SeriesBuffer } from "./buffer.js";
import { GatewayClient, GatewayError } from "./gateway.js";
import {
  ConnectionState,
  DataBody,
  LiveEvent,
  NodeStatusRow,
  ResultBody,
  StatusBody,
  isControlApplied,
} from "./types.js";

export interface SteerMarker {
  u: number;
  seq: number;
  submittedAtMs: number;
  confirmed: boolean;
}

export interface ModelOptions {
  stabilityNode: string; // results node feeding the stability chart
  steerDevice: string; // control target for manual set_u
  steerControlDevice: string; // pseudo-device gating the steer node
  seriesCapacity: number;
}

export const DEFAULT_OPTIONS: ModelOptions = {
  stabilityNode: "stability",
  steerDevice: "burner",
  steerControlDevice: "steer",
  seriesCapacity: 5000,
};

export class DashboardModel {
  readonly stability: SeriesBuffer;
  readonly uTrace: SeriesBuffer;
  spectroCurve: number[] = [];
  spectroTsUs = 0;
  psd: { gm_nm: number; gsd: number; ts_us: number } | null = null;
  nodes = new Map<string, NodeStatusRow>();
  connection: ConnectionState = "disconnected";
  scopes: string[] = [];
  principal = "";
  controllerEnabled = true;
  lastError = "";
  needsLogin = false;
  markers: SteerMarker[] = [];
  eventsSeen = 0;
  lastEventAtMs = 0;

  constructor(
    private client: GatewayClient,
    private experiment: string,
    readonly options: ModelOptions = DEFAULT_OPTIONS,
    private now: () => number = () => Date.now(),
  ) {
    this.stability = new SeriesBuffer(options.seriesCapacity);
    this.uTrace = new SeriesBuffer(options.seriesCapacity);
  }

  get steeringEnabled(): boolean {
    return this.scopes.includes("control");
  }

  async loadIdentity(): Promise<void> {
    const info = await this.client.tokenInfo();
    this.scopes = info.scopes;
    this.principal = info.principal;
  }

  setConnection(state: ConnectionState): void {
    this.connection = state;
    if (state === "unauthorized") {
      this.needsLogin = true;
    }
  }

  setNodeStatuses(rows: NodeStatusRow[]): void {
    for (const row of rows) {
      this.nodes.set(row.node, row);
    }
  }

  applyEvent(event: LiveEvent): void {
    this.eventsSeen++;
    this.lastEventAtMs = this.now();
    if (event.experiment_id !== this.experiment) return;
    if (event.channel === "results") {
      this.applyResult(event.body as ResultBody);
    } else if (event.channel === "data") {
      this.applyData(event.body as DataBody);
    } else if (event.channel === "status") {
      this.applyStatus(event.body as StatusBody);
    }
  }

  private applyResult(body: ResultBody): void {
    if (body.node === this.options.stabilityNode && typeof body.value.index === "number") {
      this.stability.push(body.ts_us, body.value.index);
    }
  }

  private applyData(body: DataBody): void {
    if (body.device_id === "spectro" && body.rows.length) {
      this.spectroCurve = body.rows[body.rows.length - 1];
      this.spectroTsUs = body.ts_us;
    } else if (body.device_id === "psd" && body.rows.length) {
      const row = body.rows[body.rows.length - 1];
      this.psd = { gm_nm: row[0], gsd: row[1], ts_us: body.ts_us };
    }
    // Any fresh instrument data confirms pending optimistic markers.
    if (body.device_id === "psd" || body.device_id === "plif") {
      for (const marker of this.markers) {
        if (!marker.confirmed && this.lastEventAtMs >= marker.submittedAtMs) {
          marker.confirmed = true;
        }
      }
    }
  }

  private applyStatus(body: StatusBody): void {
    if (isControlApplied(body)) {
      if (body.command_name === "set_u" && typeof body.params.u === "number") {
        this.uTrace.push(body.ts_us, body.params.u);
      }
      return;
    }
    const existing = this.nodes.get(body.node);
    this.nodes.set(body.node, { ...existing, node: body.node, state: body.state });
  }

  validateU(u: number): string | null {
    if (!Number.isFinite(u) || u < 0 || u > 1) {
      return "u must be between 0 and 1";
    }
    return null;
  }

  async steer(u: number): Promise<SteerMarker> {
    const problem = this.validateU(u);
    if (problem) {
      this.lastError = problem;
      throw new Error(problem);
    }
    try {
      const seq = await this.client.postControl(
        this.experiment, this.options.steerDevice, "set_u", { u },
      );
      const marker: SteerMarker = {
        u, seq, submittedAtMs: this.now(), confirmed: false,
      };
      this.markers.push(marker);
      this.lastError = "";
      return marker;
    } catch (err) {
      this.lastError =
        err instanceof GatewayError && err.status === 403
          ? "permission denied: token lacks control scope"
          : String(err);
      throw err;
    }
  }

  async setControllerEnabled(enabled: boolean): Promise<void> {
    await this.client.postControl(
      this.experiment, this.options.steerControlDevice, "set_enabled", { enabled },
    );
    this.controllerEnabled = enabled;
  }

  async refreshNodeStatus(): Promise<void> {
    this.setNodeStatuses(await this.client.pipelineStatus());
  }
}
