/** Thin typed client over the EMS service endpoints.
 *
 * Every control-panel action maps 1:1 to one documented endpoint; the
 * console never mutates engine state any other way. The fetch function is
 * injectable so tests can run against recorded responses.
 */

import type {
  Artifact, AttackPayload, GraphPayload, SessionStatus, StageName,
  StepResponse,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    readonly context: string,
    readonly status: number,
    detail: string,
  ) {
    super(`${context}: ${detail}`);
  }
}

async function expectJson<T>(context: string, res: Response): Promise<T> {
  if (!res.ok) {
    let detail = `HTTP ${res.status}`;
    try {
      const body = await res.json();
      if (body && typeof body.detail === "string") detail = body.detail;
      else if (body) detail = JSON.stringify(body.detail ?? body);
    } catch {
      /* non-JSON error body; keep the status line */
    }
    throw new ApiError(context, res.status, detail);
  }
  return (await res.json()) as T;
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private post(url: string, body: unknown): Promise<Response> {
    return this.fetchImpl(this.base + url, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async createSession(caseDoc: unknown, seed: number): Promise<SessionStatus> {
    const res = await this.post("/sessions", { case: caseDoc, seed });
    return expectJson("create session", res);
  }

  async status(sid: string): Promise<SessionStatus> {
    const res = await this.fetchImpl(`${this.base}/sessions/${sid}`);
    return expectJson("session status", res);
  }

  async step(sid: string, body: Record<string, unknown> = {}): Promise<StepResponse> {
    const res = await this.post(`/sessions/${sid}/step`, body);
    return expectJson("step", res);
  }

  async armAttack(sid: string, payload: AttackPayload): Promise<unknown> {
    const res = await this.post(`/sessions/${sid}/attack`, payload);
    return expectJson("arm attack", res);
  }

  async disarmAttack(sid: string): Promise<unknown> {
    const res = await this.fetchImpl(`${this.base}/sessions/${sid}/attack`, {
      method: "DELETE",
    });
    return expectJson("disarm attack", res);
  }

  async calibrateDetector(
    sid: string, body: Record<string, unknown> = {},
  ): Promise<unknown> {
    const res = await this.post(`/sessions/${sid}/detector/calibrate`, body);
    return expectJson("calibrate detector", res);
  }

  async report(sid: string, stage: StageName, tick: number): Promise<Artifact> {
    const res = await this.fetchImpl(
      `${this.base}/sessions/${sid}/reports/${stage}/${tick}`);
    return expectJson(`${stage} report`, res);
  }

  async graph(sid: string): Promise<GraphPayload> {
    const res = await this.fetchImpl(`${this.base}/sessions/${sid}/graph`);
    return expectJson("graph", res);
  }

  async events(sid: string): Promise<string> {
    const res = await this.fetchImpl(`${this.base}/sessions/${sid}/events`);
    if (!res.ok) throw new ApiError("event log", res.status, `HTTP ${res.status}`);
    return res.text();
  }
}
