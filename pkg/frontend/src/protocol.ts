// Wire schema of the session server (see docs/protocol.md in the repo root).

import { z } from "zod";

export const FORMAT_VERSION = 1;

export type BranchIndices = [number, number, number, number];

export const VERTICAL_LABELS = ["-1 m", "0", "+1 m"];
export const YAW_LABELS = ["-15°", "0", "+15°"];
export const FORWARD_LABELS = ["-1 m", "0", "+1 m"];
export const LATERAL_LABELS = ["-0.5 m", "0", "+0.5 m"];

const indices = z.tuple([z.number(), z.number(), z.number(), z.number()]);
const pose = z.object({ x: z.number(), y: z.number(), z: z.number(), yaw: z.number() });

const worldInfo = z.object({
  spline: z.array(z.tuple([z.number(), z.number()])),
  width: z.number(),
  corridor_half_width: z.number(),
  num_segments: z.number(),
  segment_length: z.number(),
  total_length: z.number(),
});

const helloPayload = z.object({
  world: worldInfo,
  method: z.string(),
  hyperparams: z.record(z.string(), z.union([z.number(), z.null()])),
  num_episodes: z.number(),
  online_retrain_interval: z.number().nullable(),
  policy_mode: z.string(),
});

const marker = z.object({ t: z.number(), m: z.number(), x: z.number(), y: z.number() });

const statePayload = z.object({
  episode_id: z.number(),
  t: z.number(),
  pose,
  mask: z.string(),
  coverage_count: z.number(),
  visited: z.string(),
  terminated: z.boolean(),
  trajectory: z.array(marker),
  finished: z.boolean(),
});

const proposalPayload = z.object({
  t: z.number(),
  proposal: indices,
  branch_probs: z.array(z.array(z.number())),
  reward_estimates: z.array(z.number()),
  pose,
  coverage_count: z.number(),
});

const stepResultPayload = z.object({
  t: z.number(),
  answers_seq: z.number(),
  executed: indices,
  m: z.number(),
  reward: z.number(),
  terminated: z.boolean(),
  termination_reason: z.string(),
  pose,
  mask: z.string(),
  coverage_count: z.number(),
  segment_entered: z.number().nullable(),
});

const retrainProgressPayload = z.object({
  epoch: z.number(),
  of: z.number(),
  report: z.record(z.string(), z.union([z.number(), z.string(), z.null()])),
});

const checkpointSavedPayload = z.object({
  path: z.string().nullable(),
  retrain_index: z.number(),
});

const errorPayload = z.object({ message: z.string() });

const envelope = z.object({
  format_version: z.number(),
  type: z.string(),
  session_id: z.string().nullable(),
  seq: z.number(),
  payload: z.unknown(),
});

export type WorldInfo = z.infer<typeof worldInfo>;
export type Pose = z.infer<typeof pose>;
export type Marker = z.infer<typeof marker>;
export type HelloPayload = z.infer<typeof helloPayload>;
export type StatePayload = z.infer<typeof statePayload>;
export type ProposalPayload = z.infer<typeof proposalPayload>;
export type StepResultPayload = z.infer<typeof stepResultPayload>;
export type RetrainProgressPayload = z.infer<typeof retrainProgressPayload>;
export type CheckpointSavedPayload = z.infer<typeof checkpointSavedPayload>;

export type ServerMessage =
  | { type: "hello"; sessionId: string; seq: number; payload: HelloPayload }
  | { type: "state_update"; sessionId: string; seq: number; payload: StatePayload }
  | { type: "action_proposal"; sessionId: string; seq: number; payload: ProposalPayload }
  | { type: "step_result"; sessionId: string; seq: number; payload: StepResultPayload }
  | { type: "retrain_progress"; sessionId: string; seq: number; payload: RetrainProgressPayload }
  | { type: "checkpoint_saved"; sessionId: string; seq: number; payload: CheckpointSavedPayload }
  | { type: "error"; sessionId: string | null; seq: number; payload: { message: string } };

const payloadSchemas: Record<string, z.ZodTypeAny> = {
  hello: helloPayload,
  state_update: statePayload,
  action_proposal: proposalPayload,
  step_result: stepResultPayload,
  retrain_progress: retrainProgressPayload,
  checkpoint_saved: checkpointSavedPayload,
  error: errorPayload,
};

export function parseServerMessage(raw: string): ServerMessage {
  const env = envelope.parse(JSON.parse(raw));
  if (env.format_version !== FORMAT_VERSION) {
    throw new Error(`unsupported protocol format_version ${env.format_version}`);
  }
  const schema = payloadSchemas[env.type];
  if (!schema) {
    throw new Error(`unknown message type ${env.type}`);
  }
  const payload = schema.parse(env.payload);
  return {
    type: env.type,
    sessionId: env.session_id,
    seq: env.seq,
    payload,
  } as ServerMessage;
}

export function helloFrame(sessionId: string | null): string {
  return JSON.stringify({
    format_version: FORMAT_VERSION,
    type: "hello",
    payload: { session_id: sessionId },
  });
}

export function decisionFrame(answersSeq: number, intervene: boolean, override: BranchIndices | null): string {
  return JSON.stringify({
    format_version: FORMAT_VERSION,
    type: "decision",
    payload: { answers_seq: answersSeq, intervene, override },
  });
}

export function retrainFrame(): string {
  return JSON.stringify({ format_version: FORMAT_VERSION, type: "retrain_request", payload: {} });
}

export function jointIndex(a: BranchIndices): number {
  return ((a[0] * 3 + a[1]) * 3 + a[2]) * 3 + a[3];
}

export function fromJointIndex(idx: number): BranchIndices {
  return [Math.floor(idx / 27) % 3, Math.floor(idx / 9) % 3, Math.floor(idx / 3) % 3, idx % 3];
}

export function actionLabel(a: BranchIndices): string {
  return `v${VERTICAL_LABELS[a[0]]} y${YAW_LABELS[a[1]]} f${FORWARD_LABELS[a[2]]} l${LATERAL_LABELS[a[3]]}`;
}
