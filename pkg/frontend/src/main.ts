// Browser wiring: one SessionClient driving the live views.

import { SessionClient } from "./session.js";
import { BranchIndices } from "./protocol.js";
import {
  drawMap,
  drawMask,
  drawRateChart,
  renderBranchProbs,
  renderRewardBars,
} from "./views.js";

const $ = (id: string) => document.getElementById(id)!;

const urlInput = $("ws-url") as HTMLInputElement;
const connectBtn = $("connect") as HTMLButtonElement;
const banner = $("banner");
const statusEl = $("status");
const acceptBtn = $("accept") as HTMLButtonElement;
const overrideBtn = $("override") as HTMLButtonElement;
const retrainBtn = $("retrain") as HTMLButtonElement;
const retrainStatus = $("retrain-status");
const selectors = ["sel-vertical", "sel-yaw", "sel-forward", "sel-lateral"].map(
  (id) => $(id) as HTMLSelectElement,
);
const mapCanvas = $("map") as HTMLCanvasElement;
const maskCanvas = $("mask") as HTMLCanvasElement;
const chartCanvas = $("chart") as HTMLCanvasElement;
const probsEl = $("branch-probs");
const rewardsEl = $("reward-bars");

const client = new SessionClient(
  (url) => new WebSocket(url) as unknown as import("./session.js").SocketLike,
  render,
);

connectBtn.onclick = () => {
  client.connect(urlInput.value);
};

acceptBtn.onclick = () => {
  client.submitDecision(false);
};

overrideBtn.onclick = () => {
  const override = selectors.map((s) => Number(s.value)) as BranchIndices;
  client.submitDecision(true, override);
};

retrainBtn.onclick = () => {
  client.requestRetrain();
};

function render(c: SessionClient): void {
  const proposal = c.pending?.payload ?? null;
  const enabled = c.decisionEnabled;
  acceptBtn.disabled = !enabled;
  overrideBtn.disabled = !enabled;
  selectors.forEach((s) => (s.disabled = !enabled));
  retrainBtn.disabled = c.connection !== "open" || c.retrain.running;

  if (c.connection === "closed" && !c.finished) {
    banner.textContent = "disconnected: views frozen at the last state; reconnect to resume";
    banner.className = "banner warn";
    connectBtn.textContent = "reconnect";
  } else if (c.finished) {
    banner.textContent = "session finished";
    banner.className = "banner ok";
  } else {
    banner.textContent = "";
    banner.className = "banner";
  }

  const parts = [`connection: ${c.connection}`];
  if (c.state) {
    parts.push(
      `episode ${c.state.episode_id}`,
      `t=${c.state.t}`,
      `coverage ${c.state.coverage_count}`,
      `interventions ${c.records.reduce((a, r) => a + r.m, 0)}/${c.records.length}`,
    );
  }
  if (c.lastError) parts.push(`last error: ${c.lastError}`);
  statusEl.textContent = parts.join("  |  ");

  if (c.hello && c.state) {
    drawMap(mapCanvas, c.hello.world, c.markers, c.visited, c.state.pose);
    drawMask(maskCanvas, c.state.mask);
  }
  drawRateChart(chartCanvas, c.rateSeries);
  renderBranchProbs(probsEl, proposal);
  renderRewardBars(rewardsEl, proposal);

  if (proposal) {
    proposal.proposal.forEach((idx, b) => {
      selectors[b].value = String(idx);
    });
  }
  retrainStatus.textContent = c.retrain.running
    ? `retraining: epoch ${c.retrain.epoch + 1}/${c.retrain.of || "?"}`
    : c.retrain.count
      ? `retrains so far: ${c.retrain.count}`
      : "";
}

render(client);
