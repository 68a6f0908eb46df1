/** Thin typed client for the service HTTP API; fetch-based, DOM-free. */

import type {
  CheckpointInfo,
  EditRequestPayload,
  HealthPayload,
  JobRecord,
  SamplePayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
    public field?: string,
  ) {
    super(message);
  }
}

async function raiseForStatus(res: Response): Promise<void> {
  if (res.ok) return;
  let code = `http_${res.status}`;
  let message = res.statusText;
  let field: string | undefined;
  try {
    const body = (await res.json()) as { error?: { code?: string; message?: string; field?: string } };
    if (body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
      field = body.error.field;
    }
  } catch {
    // non-JSON error body; keep the HTTP status text
  }
  throw new ApiError(res.status, code, message, field);
}

export class ApiClient {
  constructor(
    public baseUrl: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  async health(): Promise<HealthPayload> {
    const res = await this.fetchImpl(this.url("/api/health"));
    await raiseForStatus(res);
    return (await res.json()) as HealthPayload;
  }

  async checkpoints(): Promise<CheckpointInfo[]> {
    const res = await this.fetchImpl(this.url("/api/checkpoints"));
    await raiseForStatus(res);
    return (await res.json()) as CheckpointInfo[];
  }

  async samples(n: number): Promise<SamplePayload[]> {
    const res = await this.fetchImpl(this.url(`/api/samples?n=${n}`));
    await raiseForStatus(res);
    return (await res.json()) as SamplePayload[];
  }

  async submitEdit(payload: EditRequestPayload): Promise<string> {
    const res = await this.fetchImpl(this.url("/api/edit"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
    await raiseForStatus(res);
    const body = (await res.json()) as { job_id: string };
    return body.job_id;
  }

  async job(jobId: string): Promise<JobRecord> {
    const res = await this.fetchImpl(this.url(`/api/jobs/${jobId}`));
    await raiseForStatus(res);
    return (await res.json()) as JobRecord;
  }

  jobImageUrl(jobId: string): string {
    return this.url(`/api/jobs/${jobId}/image`);
  }

  async jobImageBytes(jobId: string): Promise<ArrayBuffer> {
    const res = await this.fetchImpl(this.jobImageUrl(jobId));
    await raiseForStatus(res);
    return res.arrayBuffer();
  }

  /** Poll until the job settles; resolves with the final record. */
  async waitForJob(
    jobId: string,
    opts: { intervalMs?: number; timeoutMs?: number } = {},
  ): Promise<JobRecord> {
    const interval = opts.intervalMs ?? 250;
    const deadline = Date.now() + (opts.timeoutMs ?? 120_000);
    for (;;) {
      const record = await this.job(jobId);
      if (record.status === "done" || record.status === "failed") {
        return record;
      }
      if (Date.now() > deadline) {
        throw new ApiError(0, "poll_timeout", `job ${jobId} did not settle in time`);
      }
      await new Promise((r) => setTimeout(r, interval));
    }
  }
}

/** SHA-256 of image bytes; used for the "identical resubmission" badge. */
export async function hashBytes(buf: ArrayBuffer): Promise<string> {
  const digest = await crypto.subtle.digest("SHA-256", buf);
  return Array.from(new Uint8Array(digest))
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}
