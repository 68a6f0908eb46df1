/** Wire types mirroring shared/api-schema.json. */

export interface BoxArray extends Array<number> {
  0: number;
  1: number;
  2: number;
  3: number;
}

export interface Box {
  x: number;
  y: number;
  w: number;
  h: number;
}

export interface LinePayload {
  box: [number, number, number, number];
  text: string;
}

export interface EditRequestPayload {
  image: string; // base64 PNG
  lines: LinePayload[];
  checkpoint: string;
  steps?: number | null;
  seed?: number;
  color?: string | null;
  client_token?: string | null;
}

export interface JobResult {
  width: number;
  height: number;
  prompt: string;
  seed: number;
  elapsed_ms: number;
}

export interface JobError {
  code: string;
  field?: string;
  message: string;
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface JobRecord {
  job_id: string;
  status: JobStatus;
  request?: Record<string, unknown>;
  result?: JobResult | null;
  error?: JobError | null;
  created_at: number;
  started_at?: number | null;
  finished_at?: number | null;
}

export interface CheckpointInfo {
  id: string;
  packs: string[];
  axis: "vertical" | "horizontal";
  trained_steps: number;
}

export interface SampleLinePayload {
  box: [number, number, number, number];
  text: string;
  color?: number[];
  color_name?: string;
}

export interface SamplePayload {
  idx: number;
  w: number;
  h: number;
  pack_id: string;
  lines: SampleLinePayload[];
  image: string; // base64 PNG
}

export interface HealthPayload {
  ok: boolean;
  queue_depth: number;
}
