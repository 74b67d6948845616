// DOM bootstrap: wires the model to panels, charts, and the steering form.

import { drawLineChart, drawSpectrum } from "./charts.js";
import { GatewayClient } from "./gateway.js";
import { DashboardModel, DEFAULT_OPTIONS } from "./model.js";
import { LiveSocket, type WebSocketLike } from "./socket.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function query(): URLSearchParams {
  return new URLSearchParams(window.location.search);
}

let socket: LiveSocket | null = null;
let model: DashboardModel | null = null;
let renderTimer: number | null = null;
let statusTimer: number | null = null;

async function connect(): Promise<void> {
  const baseUrl = (el<HTMLInputElement>("gateway-url").value || "").replace(/\/+$/, "");
  const token = el<HTMLInputElement>("token").value;
  const experiment = el<HTMLInputElement>("experiment").value || "fsp-001";
  if (!baseUrl || !token) {
    el("conn-state").textContent = "enter gateway URL and token";
    return;
  }
  disconnect();

  const client = new GatewayClient({ baseUrl, token });
  model = new DashboardModel(client, experiment, DEFAULT_OPTIONS);
  try {
    await model.loadIdentity();
  } catch (err) {
    el("conn-state").textContent = `login failed: ${err}`;
    return;
  }
  el("principal").textContent = `${model.principal} [${model.scopes.join(", ")}]`;
  updateSteeringAccess();

  model.setConnection("connecting");
  socket = new LiveSocket(
    client.wsUrl(experiment, ["data", "results", "status"]),
    {
      onEvent: (event) => model?.applyEvent(event),
      onConnectionChange: (up) => model?.setConnection(up ? "connected" : "disconnected"),
      onAuthFailure: () => {
        model?.setConnection("unauthorized");
        el("conn-state").textContent = "unauthorized: check token";
      },
    },
    (url) => new WebSocket(url) as unknown as WebSocketLike,
  );
  socket.connect();

  renderTimer = window.setInterval(render, 250);
  statusTimer = window.setInterval(() => {
    model?.refreshNodeStatus().catch(() => undefined);
  }, 2000);
}

function disconnect(): void {
  socket?.close();
  socket = null;
  if (renderTimer !== null) window.clearInterval(renderTimer);
  if (statusTimer !== null) window.clearInterval(statusTimer);
  renderTimer = statusTimer = null;
}

function updateSteeringAccess(): void {
  if (!model) return;
  const canSteer = model.steeringEnabled;
  el<HTMLInputElement>("steer-slider").disabled = !canSteer;
  el<HTMLInputElement>("steer-value").disabled = !canSteer;
  el<HTMLButtonElement>("steer-submit").disabled = !canSteer;
  el<HTMLInputElement>("controller-toggle").disabled = !canSteer;
  el("steer-hint").textContent = canSteer
    ? ""
    : "read-only token: steering disabled";
}

function render(): void {
  if (!model) return;
  el("conn-state").textContent = model.connection;
  el("conn-state").className = `badge ${model.connection}`;

  const stab = model.stability.toArrays();
  drawLineChart(el<HTMLCanvasElement>("stability-chart"), stab.xs, stab.ys, {
    yMin: 0, yMax: 1, label: "stability index",
  });
  const u = model.uTrace.toArrays();
  drawLineChart(el<HTMLCanvasElement>("u-chart"), u.xs, u.ys, {
    yMin: 0, yMax: 1, color: "#f0a95c", label: "applied u",
  });
  drawSpectrum(el<HTMLCanvasElement>("spectro-chart"), model.spectroCurve);

  el("psd-summary").textContent = model.psd
    ? `gm ${model.psd.gm_nm.toFixed(2)} nm, gsd ${model.psd.gsd.toFixed(3)}`
    : "no data yet";

  const rows = [...model.nodes.values()]
    .map(
      (n) =>
        `<tr><td>${n.node}</td><td class="state-${n.state}">${n.state}</td>` +
        `<td>${n.in ?? ""}</td><td>${n.out ?? ""}</td><td>${n.errors ?? ""}</td></tr>`,
    )
    .join("");
  el("node-grid").innerHTML =
    `<tr><th>node</th><th>state</th><th>in</th><th>out</th><th>errors</th></tr>${rows}`;

  const markers = model.markers
    .slice(-5)
    .map((m) => `u=${m.u} seq=${m.seq} ${m.confirmed ? "confirmed" : "pending"}`)
    .join(" | ");
  el("steer-markers").textContent = markers;
  if (model.lastError) el("steer-error").textContent = model.lastError;
}

async function submitSteer(): Promise<void> {
  if (!model) return;
  const u = parseFloat(el<HTMLInputElement>("steer-value").value);
  el("steer-error").textContent = "";
  const problem = model.validateU(u);
  if (problem) {
    el("steer-error").textContent = problem; // no request leaves the browser
    return;
  }
  try {
    const marker = await model.steer(u);
    el("steer-ack").textContent = `accepted, seq ${marker.seq}`;
  } catch {
    el("steer-ack").textContent = "";
    el("steer-error").textContent = model.lastError;
  }
}

window.addEventListener("DOMContentLoaded", () => {
  const params = query();
  el<HTMLInputElement>("gateway-url").value =
    params.get("gateway") ?? `http://${window.location.hostname}:8080`;
  el<HTMLInputElement>("token").value = params.get("token") ?? "";
  el<HTMLInputElement>("experiment").value = params.get("experiment") ?? "fsp-001";

  el("connect").addEventListener("click", () => void connect());
  el("steer-submit").addEventListener("click", () => void submitSteer());
  const slider = el<HTMLInputElement>("steer-slider");
  const value = el<HTMLInputElement>("steer-value");
  slider.addEventListener("input", () => (value.value = slider.value));
  el<HTMLInputElement>("controller-toggle").addEventListener("change", (ev) => {
    const enabled = (ev.target as HTMLInputElement).checked;
    void model?.setControllerEnabled(enabled).catch(() => {
      el("steer-error").textContent = model?.lastError ?? "toggle failed";
    });
  });
});
