import { describe, expect, it } from "vitest";

import { FORMAT_VERSION } from "../src/protocol";
import { SessionClient, SocketLike } from "../src/session";

class FakeSocket implements SocketLike {
  sent: string[] = [];
  closed = false;
  onopen: ((ev?: any) => void) | null = null;
  onmessage: ((ev: { data: any }) => void) | null = null;
  onclose: ((ev?: any) => void) | null = null;
  onerror: ((ev?: any) => void) | null = null;

  send(data: string) {
    this.sent.push(data);
  }

  close() {
    this.closed = true;
    this.onclose?.();
  }

  open() {
    this.onopen?.();
  }

  deliver(type: string, seq: number, payload: unknown, sessionId = "s1") {
    this.onmessage?.({
      data: JSON.stringify({
        format_version: FORMAT_VERSION,
        type,
        session_id: sessionId,
        seq,
        payload,
      }),
    });
  }
}

const POSE = { x: 0.5, y: 0, z: 6, yaw: 0 };

function statePayload(t = 0) {
  return {
    episode_id: 0,
    t,
    pose: POSE,
    mask: "0".repeat(256),
    coverage_count: 1,
    visited: "1" + "0".repeat(9),
    terminated: false,
    trajectory: [],
    finished: false,
  };
}

function proposalPayload(t = 0) {
  return {
    t,
    proposal: [1, 1, 2, 1],
    branch_probs: [
      [0.2, 0.5, 0.3],
      [0.1, 0.8, 0.1],
      [0.1, 0.1, 0.8],
      [0.3, 0.4, 0.3],
    ],
    reward_estimates: new Array(81).fill(0).map((_, i) => i / 81),
    pose: POSE,
    coverage_count: 1,
  };
}

function stepPayload(t: number, m: number, answersSeq: number) {
  return {
    t,
    answers_seq: answersSeq,
    executed: m ? [0, 0, 0, 0] : [1, 1, 2, 1],
    m,
    reward: 1,
    terminated: false,
    termination_reason: "none",
    pose: POSE,
    mask: "1".repeat(256),
    coverage_count: 2,
    segment_entered: 1,
  };
}

function connected(): { client: SessionClient; socket: FakeSocket } {
  const socket = new FakeSocket();
  const client = new SessionClient(() => socket);
  client.connect("ws://test");
  socket.open();
  socket.deliver("hello", 1, {
    world: {
      spline: [
        [0, 0],
        [10, 0],
      ],
      width: 6,
      corridor_half_width: 5,
      num_segments: 10,
      segment_length: 1,
      total_length: 10,
    },
    method: "SPAR-H",
    hyperparams: { alpha: 1 },
    num_episodes: 1,
    online_retrain_interval: null,
    policy_mode: "greedy",
  });
  socket.deliver("state_update", 2, statePayload());
  return { client, socket };
}

describe("decision guard", () => {
  it("enables controls only while a proposal is pending", () => {
    const { client, socket } = connected();
    expect(client.decisionEnabled).toBe(false);
    socket.deliver("action_proposal", 3, proposalPayload());
    expect(client.decisionEnabled).toBe(true);
    expect(client.submitDecision(false)).toBe(true);
    expect(client.decisionEnabled).toBe(false);
  });

  it("blocks double submission for the same proposal", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 3, proposalPayload());
    expect(client.submitDecision(false)).toBe(true);
    expect(client.submitDecision(false)).toBe(false);
    expect(socket.sent.filter((s) => JSON.parse(s).type === "decision")).toHaveLength(1);
  });

  it("references the answered proposal's sequence number", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 7, proposalPayload());
    client.submitDecision(true, [0, 0, 0, 0]);
    const frame = JSON.parse(socket.sent.at(-1)!);
    expect(frame.payload.answers_seq).toBe(7);
    expect(frame.payload.intervene).toBe(true);
    expect(frame.payload.override).toEqual([0, 0, 0, 0]);
  });

  it("re-enables only when the server re-issues the proposal after an error", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 3, proposalPayload());
    client.submitDecision(false);
    socket.deliver("error", 0, { message: "stale decision" });
    expect(client.lastError).toBe("stale decision");
    expect(client.decisionEnabled).toBe(false); // still no proposal
    socket.deliver("action_proposal", 4, proposalPayload());
    expect(client.decisionEnabled).toBe(true);
  });

  it("requires an override action when intervening", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 3, proposalPayload());
    expect(() => client.submitDecision(true)).toThrow(/override/);
  });
});

describe("state tracking", () => {
  it("appends step records, markers, and intervention flags", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 3, proposalPayload(0));
    client.submitDecision(false);
    socket.deliver("step_result", 4, stepPayload(0, 0, 3));
    socket.deliver("action_proposal", 5, proposalPayload(1));
    client.submitDecision(true, [0, 0, 0, 0]);
    socket.deliver("step_result", 6, stepPayload(1, 1, 5));
    expect(client.records.map((r) => r.m)).toEqual([0, 1]);
    expect(client.markers).toHaveLength(2);
    expect(client.rateSeries).toEqual([0, 0.5]);
    expect(client.visited[1]).toBe("1"); // segment_entered painted
    expect(client.state!.t).toBe(2);
  });

  it("rejects backwards sequence numbers", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 5, proposalPayload());
    expect(() => socket.deliver("state_update", 5, statePayload())).toThrow(/sequence/);
  });

  it("clears the pending proposal on disconnect and resumes by session id", () => {
    const { client, socket } = connected();
    socket.deliver("action_proposal", 3, proposalPayload());
    expect(client.decisionEnabled).toBe(true);
    socket.close();
    expect(client.connection).toBe("closed");
    expect(client.decisionEnabled).toBe(false);
    expect(client.sessionId).toBe("s1"); // kept for the reconnect hello
  });

  it("tracks retrain progress frames", () => {
    const { client, socket } = connected();
    socket.deliver("retrain_progress", 3, { epoch: 0, of: 2, report: { method: "SPAR-H" } });
    expect(client.retrain.running).toBe(true);
    socket.deliver("checkpoint_saved", 4, { path: null, retrain_index: 1 });
    expect(client.retrain.running).toBe(false);
    expect(client.retrain.count).toBe(1);
  });
});
