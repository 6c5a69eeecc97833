// Client-side session state machine.
//
// UI state is updated only from server messages; user inputs are emitted
// as decision / retrain frames. The pending-proposal guard enforces one
// decision per proposal on this side of the wire: submitting clears the
// pending slot, and only the next action_proposal (including the re-issue
// the server sends after rejecting a bad decision) re-enables controls.

import {
  BranchIndices,
  HelloPayload,
  Marker,
  ProposalPayload,
  ServerMessage,
  StatePayload,
  StepResultPayload,
  decisionFrame,
  helloFrame,
  parseServerMessage,
  retrainFrame,
} from "./protocol.js";
import { interventionRateSeries } from "./chart.js";

// Structural subset shared by the browser WebSocket and the `ws` package.
export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: any) => void) | null;
  onmessage: ((ev: { data: any }) => void) | null;
  onclose: ((ev?: any) => void) | null;
  onerror: ((ev?: any) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export type ConnectionState = "idle" | "connecting" | "open" | "closed";

export interface StepRecord {
  t: number;
  m: number;
  executed: BranchIndices;
  reward: number;
  terminated: boolean;
  reason: string;
}

export interface RetrainState {
  running: boolean;
  epoch: number;
  of: number;
  count: number;
  lastReport: Record<string, number | string | null> | null;
}

export class SessionClient {
  connection: ConnectionState = "idle";
  sessionId: string | null = null;
  hello: HelloPayload | null = null;
  state: StatePayload | null = null;
  pending: { seq: number; payload: ProposalPayload } | null = null;
  decisionInFlight = false;
  records: StepRecord[] = [];
  markers: Marker[] = [];
  visited: string = "";
  lastError: string | null = null;
  finished = false;
  retrain: RetrainState = { running: false, epoch: 0, of: 0, count: 0, lastReport: null };
  private lastSeq = 0;
  private socket: SocketLike | null = null;

  constructor(
    private makeSocket: SocketFactory,
    private onChange: (client: SessionClient) => void = () => {},
  ) {}

  get decisionEnabled(): boolean {
    return this.pending !== null && !this.decisionInFlight && this.connection === "open";
  }

  get interventionFlags(): number[] {
    return this.records.map((r) => r.m);
  }

  get rateSeries(): number[] {
    return interventionRateSeries(this.interventionFlags);
  }

  connect(url: string): void {
    this.connection = "connecting";
    const socket = this.makeSocket(url);
    this.socket = socket;
    socket.onopen = () => {
      this.connection = "open";
      socket.send(helloFrame(this.sessionId));
      this.onChange(this);
    };
    socket.onmessage = (ev) => {
      const text = typeof ev.data === "string" ? ev.data : String(ev.data);
      this.handleFrame(text);
    };
    socket.onclose = () => {
      this.connection = "closed";
      this.pending = null; // any pending proposal died with the connection
      this.decisionInFlight = false;
      this.onChange(this);
    };
    socket.onerror = () => {
      // onclose follows; nothing else to do
    };
    this.onChange(this);
  }

  disconnect(): void {
    this.socket?.close();
  }

  handleFrame(raw: string): ServerMessage {
    const msg = parseServerMessage(raw);
    if (msg.type === "hello" && msg.sessionId !== this.sessionId) {
      // a different session began: sequence numbering and history restart
      this.lastSeq = 0;
      this.records = [];
      this.markers = [];
      this.visited = "";
      this.finished = false;
      this.retrain = { running: false, epoch: 0, of: 0, count: 0, lastReport: null };
    }
    if (msg.type !== "error") {
      if (msg.seq <= this.lastSeq) {
        throw new Error(`server sequence went backwards: ${msg.seq} after ${this.lastSeq}`);
      }
      this.lastSeq = msg.seq;
    }
    switch (msg.type) {
      case "hello":
        this.sessionId = msg.sessionId;
        this.hello = msg.payload;
        break;
      case "state_update":
        this.applyState(msg.payload);
        break;
      case "action_proposal":
        this.pending = { seq: msg.seq, payload: msg.payload };
        this.decisionInFlight = false;
        break;
      case "step_result":
        this.applyStep(msg.payload);
        break;
      case "retrain_progress":
        this.retrain.running = true;
        this.retrain.epoch = msg.payload.epoch;
        this.retrain.of = msg.payload.of;
        this.retrain.lastReport = msg.payload.report;
        break;
      case "checkpoint_saved":
        this.retrain.running = false;
        this.retrain.count = msg.payload.retrain_index;
        break;
      case "error":
        this.lastError = msg.payload.message;
        // the server re-issues the proposal after a rejected decision;
        // controls stay disabled until it arrives
        this.decisionInFlight = false;
        break;
    }
    this.onChange(this);
    return msg;
  }

  private applyState(state: StatePayload): void {
    this.state = state;
    this.markers = [...state.trajectory];
    this.visited = state.visited;
    this.finished = state.finished;
    if (state.finished) {
      this.pending = null;
    }
  }

  private applyStep(step: StepResultPayload): void {
    this.records.push({
      t: step.t,
      m: step.m,
      executed: step.executed,
      reward: step.reward,
      terminated: step.terminated,
      reason: step.termination_reason,
    });
    this.markers.push({ t: step.t, m: step.m, x: step.pose.x, y: step.pose.y });
    if (step.segment_entered !== null && this.visited) {
      const chars = this.visited.split("");
      chars[step.segment_entered] = "1";
      this.visited = chars.join("");
    }
    if (this.state) {
      this.state = {
        ...this.state,
        t: step.t + 1,
        pose: step.pose,
        mask: step.mask,
        coverage_count: step.coverage_count,
        terminated: step.terminated,
      };
    }
  }

  submitDecision(intervene: boolean, override: BranchIndices | null = null): boolean {
    if (!this.decisionEnabled) {
      return false; // blocked locally: no proposal pending or one already answered
    }
    if (intervene && override === null) {
      throw new Error("an intervention needs an override action");
    }
    const seq = this.pending!.seq;
    this.decisionInFlight = true;
    this.pending = null;
    this.socket!.send(decisionFrame(seq, intervene, intervene ? override : null));
    this.onChange(this);
    return true;
  }

  requestRetrain(): boolean {
    if (this.connection !== "open" || this.retrain.running) {
      return false;
    }
    this.retrain.running = true;
    this.retrain.epoch = 0;
    this.socket!.send(retrainFrame());
    this.onChange(this);
    return true;
  }
}
