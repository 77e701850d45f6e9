/**
 * Typed client for the perception-study HTTP API.
 *
 * Every payload that reaches the rest of the app goes through
 * `assertBlinded`, so a server that ever leaked the ground-truth side would
 * fail the session loudly instead of silently biasing the study.
 */

export type Choice = "left" | "right";

export interface SessionInfo {
  session_id: string;
  total_trials: number;
}

export interface TrialPayload {
  trial_id: string;
  left_image_url: string;
  right_image_url: string;
  magnification: number;
}

export interface JudgmentReply {
  recorded: boolean;
  trials_left: number;
}

export interface StatsRow {
  rater: string;
  tp: number;
  fp: number;
  n: number;
  p: number | null;
  deviation: number | null;
}

export interface StatsTotals {
  tp: number;
  fp: number;
  n: number;
  pooled_p: number | null;
  weighted_deviation: number | null;
}

export interface StatsTable {
  rows: StatsRow[];
  totals: StatsTotals;
  condition: string;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

/** Exactly the fields a blinded trial may carry. */
const TRIAL_KEYS = ["trial_id", "left_image_url", "right_image_url",
                    "magnification"] as const;
const FORBIDDEN_SUBSTRINGS = ["real", "correct"];

export function assertBlinded(payload: unknown): TrialPayload {
  const obj = payload as Record<string, unknown>;
  const keys = Object.keys(obj).sort();
  const wanted = [...TRIAL_KEYS].sort();
  if (keys.length !== wanted.length ||
      keys.some((k, idx) => k !== wanted[idx])) {
    throw new Error(`trial payload keys [${keys}] are not the blinded set`);
  }
  const raw = JSON.stringify(payload);
  for (const bad of FORBIDDEN_SUBSTRINGS) {
    if (raw.includes(bad)) {
      throw new Error(`trial payload leaks ground truth (contains "${bad}")`);
    }
  }
  return payload as TrialPayload;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class StudyApi {
  constructor(private baseUrl: string,
              private fetchFn: FetchLike = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
  }

  /** Resolve a server-relative path (like an image URL) against the base. */
  resolve(path: string): string {
    return path.startsWith("http") ? path : this.baseUrl + path;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  healthz(): Promise<{ status: string }> {
    return this.request("/healthz");
  }

  createSession(rater: string, condition: string, seed: number,
                nTrials?: number): Promise<SessionInfo> {
    const body: Record<string, unknown> = { rater, condition, seed };
    if (nTrials !== undefined) body.n_trials = nTrials;
    return this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  /** Next blinded trial, or null once the session is complete. */
  async nextTrial(sessionId: string): Promise<TrialPayload | null> {
    const payload = await this.request<Record<string, unknown>>(
      `/sessions/${sessionId}/next`);
    if (payload.done === true) return null;
    return assertBlinded(payload);
  }

  submitJudgment(sessionId: string, trialId: string,
                 chosen: Choice): Promise<JudgmentReply> {
    return this.request(`/sessions/${sessionId}/judgments`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ trial_id: trialId, chosen }),
    });
  }

  stats(condition: string): Promise<StatsTable> {
    return this.request(`/stats?condition=${encodeURIComponent(condition)}`);
  }
}
