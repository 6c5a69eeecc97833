// Canvas / DOM renderers. Pure functions of the client state so the live
// views and the tests share one code path.

import { RATE_WINDOW } from "./chart.js";
import {
  BranchIndices,
  Marker,
  ProposalPayload,
  WorldInfo,
  actionLabel,
  fromJointIndex,
  jointIndex,
} from "./protocol.js";

const EXECUTED_COLOR = "#2bbf6a"; // green: executed agent proposals
const OVERRIDE_COLOR = "#ff4d4f"; // red: human overrides
const WATER_COLOR = "#1d4f91";
const CORRIDOR_COLOR = "rgba(255, 255, 255, 0.08)";
const VISITED_COLOR = "rgba(43, 191, 106, 0.35)";

interface MapTransform {
  sx: (x: number) => number;
  sy: (y: number) => number;
}

function mapTransform(world: WorldInfo, canvas: HTMLCanvasElement): MapTransform {
  let minX = Infinity, maxX = -Infinity, minY = Infinity, maxY = -Infinity;
  for (const [x, y] of world.spline) {
    minX = Math.min(minX, x); maxX = Math.max(maxX, x);
    minY = Math.min(minY, y); maxY = Math.max(maxY, y);
  }
  const pad = world.corridor_half_width + 3;
  minX -= pad; maxX += pad; minY -= pad; maxY += pad;
  const scale = Math.min(canvas.width / (maxX - minX), canvas.height / (maxY - minY));
  return {
    sx: (x) => (x - minX) * scale,
    sy: (y) => canvas.height - (y - minY) * scale, // world y up, canvas y down
  };
}

function strokePolyline(ctx: CanvasRenderingContext2D, pts: Array<[number, number]>, tf: MapTransform) {
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(tf.sx(x), tf.sy(y)) : ctx.lineTo(tf.sx(x), tf.sy(y))));
  ctx.stroke();
}

export function drawMap(
  canvas: HTMLCanvasElement,
  world: WorldInfo,
  markers: Marker[],
  visited: string,
  pose: { x: number; y: number; yaw: number } | null,
): void {
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const tf = mapTransform(world, canvas);
  const scale = Math.abs(tf.sx(1) - tf.sx(0));

  ctx.lineCap = "round";
  ctx.lineJoin = "round";
  ctx.strokeStyle = CORRIDOR_COLOR;
  ctx.lineWidth = 2 * world.corridor_half_width * scale;
  strokePolyline(ctx, world.spline, tf);
  ctx.strokeStyle = WATER_COLOR;
  ctx.lineWidth = world.width * scale;
  strokePolyline(ctx, world.spline, tf);

  // visited segments as ticks along the centerline
  if (visited) {
    ctx.strokeStyle = VISITED_COLOR;
    ctx.lineWidth = Math.max(2, world.width * scale * 0.35);
    const n = Math.min(visited.length, world.num_segments);
    for (let i = 0; i < n; i++) {
      if (visited[i] !== "1") continue;
      const s0 = i * world.segment_length;
      const s1 = Math.min((i + 1) * world.segment_length, world.total_length);
      strokePolyline(ctx, [pointAt(world, s0), pointAt(world, s1)], tf);
    }
  }

  for (const mk of markers) {
    ctx.fillStyle = mk.m ? OVERRIDE_COLOR : EXECUTED_COLOR;
    ctx.beginPath();
    ctx.arc(tf.sx(mk.x), tf.sy(mk.y), 2.5, 0, 2 * Math.PI);
    ctx.fill();
  }

  if (pose) {
    const yaw = (pose.yaw * Math.PI) / 180;
    const cx = tf.sx(pose.x);
    const cy = tf.sy(pose.y);
    ctx.strokeStyle = "#ffffff";
    ctx.fillStyle = "#ffffff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.arc(cx, cy, 4, 0, 2 * Math.PI);
    ctx.fill();
    ctx.beginPath();
    ctx.moveTo(cx, cy);
    ctx.lineTo(cx + 12 * Math.cos(yaw), cy - 12 * Math.sin(yaw));
    ctx.stroke();
  }
}

function pointAt(world: WorldInfo, s: number): [number, number] {
  // arc-length walk along the spline polyline
  let remaining = Math.max(0, Math.min(s, world.total_length));
  for (let i = 0; i + 1 < world.spline.length; i++) {
    const [x0, y0] = world.spline[i];
    const [x1, y1] = world.spline[i + 1];
    const len = Math.hypot(x1 - x0, y1 - y0);
    if (remaining <= len || i === world.spline.length - 2) {
      const f = len > 0 ? remaining / len : 0;
      return [x0 + f * (x1 - x0), y0 + f * (y1 - y0)];
    }
    remaining -= len;
  }
  return world.spline[world.spline.length - 1];
}

export function drawMask(canvas: HTMLCanvasElement, bits: string): void {
  const ctx = canvas.getContext("2d")!;
  const cell = Math.floor(Math.min(canvas.width, canvas.height) / 16);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let row = 0; row < 16; row++) {
    for (let col = 0; col < 16; col++) {
      ctx.fillStyle = bits[row * 16 + col] === "1" ? WATER_COLOR : "#23262d";
      ctx.fillRect(col * cell, row * cell, cell - 1, cell - 1);
    }
  }
}

export function drawRateChart(canvas: HTMLCanvasElement, series: number[]): void {
  const ctx = canvas.getContext("2d")!;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "rgba(255,255,255,0.25)";
  ctx.lineWidth = 1;
  for (const frac of [0.25, 0.5, 0.75]) {
    const y = canvas.height * (1 - frac);
    ctx.beginPath();
    ctx.moveTo(0, y);
    ctx.lineTo(canvas.width, y);
    ctx.stroke();
  }
  if (series.length < 2) return;
  ctx.strokeStyle = "#eec643";
  ctx.lineWidth = 2;
  ctx.beginPath();
  series.forEach((v, i) => {
    const x = (i / (series.length - 1)) * canvas.width;
    const y = canvas.height * (1 - v);
    i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
  });
  ctx.stroke();
}

export interface RewardBar {
  joint: number;
  label: string;
  value: number;
  isProposal: boolean;
}

export function rewardBars(proposal: ProposalPayload, topK = 5): RewardBar[] {
  // the proposal plus the top-K alternatives of the 81 joint actions
  const proposalJoint = jointIndex(proposal.proposal as BranchIndices);
  const order = proposal.reward_estimates
    .map((value, joint) => ({ value, joint }))
    .sort((a, b) => b.value - a.value);
  const picks = [proposalJoint];
  for (const { joint } of order) {
    if (picks.length > topK) break;
    if (joint !== proposalJoint) picks.push(joint);
  }
  return picks.map((joint) => ({
    joint,
    label: actionLabel(fromJointIndex(joint)),
    value: proposal.reward_estimates[joint],
    isProposal: joint === proposalJoint,
  }));
}

export function renderRewardBars(container: HTMLElement, proposal: ProposalPayload | null): void {
  container.innerHTML = "";
  if (!proposal) return;
  const bars = rewardBars(proposal);
  const values = bars.map((b) => b.value);
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || 1;
  for (const bar of bars) {
    const row = document.createElement("div");
    row.className = "reward-row" + (bar.isProposal ? " proposal" : "");
    const label = document.createElement("span");
    label.className = "reward-label";
    label.textContent = (bar.isProposal ? "▶ " : "") + bar.label;
    const track = document.createElement("div");
    track.className = "reward-track";
    const fill = document.createElement("div");
    fill.className = "reward-fill";
    fill.style.width = `${(6 + (94 * (bar.value - lo)) / span).toFixed(1)}%`;
    track.appendChild(fill);
    const value = document.createElement("span");
    value.className = "reward-value";
    value.textContent = bar.value.toFixed(3);
    row.append(label, track, value);
    container.appendChild(row);
  }
}

export function renderBranchProbs(container: HTMLElement, proposal: ProposalPayload | null): void {
  const names = ["vertical", "yaw", "forward", "lateral"];
  const labels = [
    ["-1 m", "0", "+1 m"],
    ["-15°", "0", "+15°"],
    ["-1 m", "0", "+1 m"],
    ["-0.5 m", "0", "+0.5 m"],
  ];
  container.innerHTML = "";
  if (!proposal) return;
  proposal.branch_probs.forEach((probs, b) => {
    const row = document.createElement("div");
    row.className = "branch-row";
    const name = document.createElement("span");
    name.className = "branch-name";
    name.textContent = names[b];
    row.appendChild(name);
    probs.forEach((p, i) => {
      const cell = document.createElement("span");
      cell.className = "branch-cell" + (proposal.proposal[b] === i ? " chosen" : "");
      cell.textContent = `${labels[b][i]} ${(100 * p).toFixed(0)}%`;
      row.appendChild(cell);
    });
    container.appendChild(row);
  });
}

export { RATE_WINDOW };
