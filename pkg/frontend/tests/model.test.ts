import { describe, expect, it } from "vitest";

import { GatewayClient, GatewayError } from "../src/gateway.js";
import { DashboardModel, DEFAULT_OPTIONS } from "../src/model.js";
import type { LiveEvent } from "../src/types.js";

// Fixture events exactly as the gateway emits them (docs/api.md).
const stabilityEvent = (tsUs: number, index: number): LiveEvent => ({
  channel: "results",
  experiment_id: "fsp-001",
  ts_us: 1,
  body: { node: "stability", ts_us: tsUs, value: { index } },
});

const spectroEvent: LiveEvent = {
  channel: "data",
  experiment_id: "fsp-001",
  ts_us: 2,
  body: {
    device_id: "spectro", seq: 0, ts_us: 5_000_000,
    rows: [[...Array(64).keys()].map((j) => j * 0.5)],
  },
};

const psdEvent: LiveEvent = {
  channel: "data",
  experiment_id: "fsp-001",
  ts_us: 3,
  body: { device_id: "psd", seq: 0, ts_us: 5_000_000, rows: [[22.5, 1.33]] },
};

const appliedEvent: LiveEvent = {
  channel: "status",
  experiment_id: "fsp-001",
  ts_us: 4,
  body: {
    kind: "control_applied", device: "burner", command_name: "set_u",
    params: { u: 0.62 }, seq: 0, ts_us: 6_000_000,
  },
};

const nodeEvent: LiveEvent = {
  channel: "status",
  experiment_id: "fsp-001",
  ts_us: 5,
  body: { node: "stability", state: "running", ts_us: 6_000_001 },
};

interface Call {
  path: string;
  method: string;
  body?: string;
}

function fakeClient(responses: Record<string, unknown>, calls: Call[] = []) {
  const fetchImpl = (async (url: string, init?: RequestInit) => {
    const path = url.replace(/^http:\/\/[^/]+/, "");
    calls.push({ path, method: init?.method ?? "GET", body: init?.body as string });
    if (path in responses) {
      const value = responses[path];
      if (value instanceof Error) {
        const ge = value as GatewayError;
        return new Response(ge.body, { status: ge.status });
      }
      return new Response(JSON.stringify(value), { status: 200 });
    }
    return new Response("{}", { status: 404 });
  }) as typeof fetch;
  return new GatewayClient({ baseUrl: "http://gw:1", token: "tok" }, fetchImpl);
}

function makeModel(responses: Record<string, unknown> = {}, calls: Call[] = []) {
  return new DashboardModel(fakeClient(responses, calls), "fsp-001", DEFAULT_OPTIONS);
}

describe("event binding", () => {
  it("a results event adds exactly one stability point with payload values", () => {
    const model = makeModel();
    model.applyEvent(stabilityEvent(123_000, 0.87));
    expect(model.stability.length).toBe(1);
    expect(model.stability.last()).toEqual({ x: 123_000, y: 0.87 });
  });

  it("spectro data replaces the latest curve untouched", () => {
    const model = makeModel();
    model.applyEvent(spectroEvent);
    expect(model.spectroCurve).toHaveLength(64);
    expect(model.spectroCurve[2]).toBe(1.0); // exactly what the payload carried
  });

  it("psd data fills the summary from payload fields", () => {
    const model = makeModel();
    model.applyEvent(psdEvent);
    expect(model.psd).toEqual({ gm_nm: 22.5, gsd: 1.33, ts_us: 5_000_000 });
  });

  it("control_applied extends the u trace", () => {
    const model = makeModel();
    model.applyEvent(appliedEvent);
    expect(model.uTrace.last()).toEqual({ x: 6_000_000, y: 0.62 });
  });

  it("node state events update the grid", () => {
    const model = makeModel();
    model.applyEvent(nodeEvent);
    expect(model.nodes.get("stability")?.state).toBe("running");
  });

  it("ignores events for other experiments", () => {
    const model = makeModel();
    model.applyEvent({ ...stabilityEvent(1, 0.5), experiment_id: "other" });
    expect(model.stability.length).toBe(0);
  });

  it("snapshot: a fixed event sequence yields a stable view state", () => {
    const model = makeModel();
    for (const ev of [
      stabilityEvent(50_000, 0.4),
      stabilityEvent(100_000, 0.5),
      spectroEvent, psdEvent, appliedEvent, nodeEvent,
    ]) {
      model.applyEvent(ev);
    }
    expect({
      stability: model.stability.toArrays(),
      u: model.uTrace.toArrays(),
      psd: model.psd,
      nodes: [...model.nodes.entries()],
      spectroTsUs: model.spectroTsUs,
    }).toMatchSnapshot();
  });
});

describe("scope gating", () => {
  it("read-only token leaves steering disabled", async () => {
    const model = makeModel({
      "/api/v1/token": { principal: "viewer", scopes: ["read"] },
    });
    await model.loadIdentity();
    expect(model.steeringEnabled).toBe(false);
  });

  it("control scope enables steering", async () => {
    const model = makeModel({
      "/api/v1/token": { principal: "op", scopes: ["read", "control"] },
    });
    await model.loadIdentity();
    expect(model.steeringEnabled).toBe(true);
  });
});

describe("steering", () => {
  it("posts exactly the documented payload", async () => {
    const calls: Call[] = [];
    const model = makeModel(
      { "/api/v1/experiments/fsp-001/control/burner": { seq: 7 } }, calls,
    );
    const marker = await model.steer(0.5);
    expect(marker.seq).toBe(7);
    expect(marker.confirmed).toBe(false);
    const post = calls.find((c) => c.method === "POST");
    expect(post?.path).toBe("/api/v1/experiments/fsp-001/control/burner");
    expect(JSON.parse(post!.body!)).toEqual({
      command_name: "set_u",
      params: { u: 0.5 },
    });
  });

  it("client-side bound check sends no request", async () => {
    const calls: Call[] = [];
    const model = makeModel({}, calls);
    await expect(model.steer(1.2)).rejects.toThrow("between 0 and 1");
    expect(calls).toHaveLength(0);
  });

  it("403 surfaces a permission error and leaves no marker", async () => {
    const model = makeModel({
      "/api/v1/experiments/fsp-001/control/burner":
        new GatewayError(403, '{"error":"missing scope"}'),
    });
    await expect(model.steer(0.5)).rejects.toThrow();
    expect(model.lastError).toContain("permission denied");
    expect(model.markers).toHaveLength(0);
  });

  it("optimistic marker confirms on the next psd/plif data event", async () => {
    const model = makeModel({
      "/api/v1/experiments/fsp-001/control/burner": { seq: 0 },
    });
    await model.steer(0.4);
    expect(model.markers[0].confirmed).toBe(false);
    model.applyEvent(spectroEvent); // spectro does not confirm
    expect(model.markers[0].confirmed).toBe(false);
    model.applyEvent(psdEvent);
    expect(model.markers[0].confirmed).toBe(true);
  });

  it("controller toggle posts set_enabled to the steer control device", async () => {
    const calls: Call[] = [];
    const model = makeModel(
      { "/api/v1/experiments/fsp-001/control/steer": { seq: 0 } }, calls,
    );
    await model.setControllerEnabled(false);
    const post = calls.find((c) => c.method === "POST");
    expect(post?.path).toBe("/api/v1/experiments/fsp-001/control/steer");
    expect(JSON.parse(post!.body!)).toEqual({
      command_name: "set_enabled",
      params: { enabled: false },
    });
    expect(model.controllerEnabled).toBe(false);
  });
});
