// Payload shapes from the gateway API (docs/api.md). The dashboard never
// computes on science data beyond plotting; every number it renders is a
// field from one of these payloads.

export type Channel = "data" | "results" | "status";

export interface LiveEvent {
  channel: Channel;
  experiment_id: string;
  ts_us: number;
  body: DataBody | ResultBody | StatusBody;
}

export interface DataBody {
  device_id: string;
  seq: number;
  ts_us: number;
  rows: number[][];
  blob?: { media_type: string; bytes: number };
}

export interface ResultBody {
  node: string;
  ts_us: number;
  value: { index?: number; u?: number; [key: string]: unknown };
}

export interface NodeStateBody {
  node: string;
  state: string;
  ts_us: number;
}

export interface ControlAppliedBody {
  kind: "control_applied";
  device: string;
  command_name: string;
  params: Record<string, number | string | boolean>;
  seq: number;
  ts_us: number;
}

export type StatusBody = NodeStateBody | ControlAppliedBody;

export interface NodeStatusRow {
  node: string;
  state: string;
  in?: number;
  out?: number;
  errors?: number;
  last_error?: string | null;
  last_activity_ts_us?: number;
}

export interface TokenInfo {
  principal: string;
  scopes: string[];
}

export type ConnectionState = "connecting" | "connected" | "disconnected" | "unauthorized";

export function isControlApplied(body: StatusBody): body is ControlAppliedBody {
  return (body as ControlAppliedBody).kind === "control_applied";
}
