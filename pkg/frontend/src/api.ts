/**
 * Typed client for the rating study HTTP+JSON protocol.
 *
 * Rater-facing payloads never include ground-truth labels; the admin
 * report (behind the X-Admin-Token header) is the only labeled surface.
 */

export interface SessionInfo {
  session_id: string;
  total: number;
}

export interface NextImage {
  token: string;
  image_url: string;
  index: number;
  total: number;
}

export interface SessionDone {
  done: true;
}

export type NextItem = NextImage | SessionDone;

export type Verdict = "real" | "fake";

export interface ClassStats {
  mean: number;
  sd: number;
  n: number;
}

export interface TTest {
  t: number | null;
  df: number;
  p: number;
  variant: string;
}

export interface StudyReport {
  raters_expected: number;
  images_total: number;
  fraction_marked_real: number;
  real_accuracy: number | null;
  synthetic_accuracy: number | null;
  fooling_rate: number | null;
  class_rating: Record<string, ClassStats>;
  class_correct: Record<string, ClassStats>;
  histogram: Record<string, number[]>;
  t_test: TTest | null;
  t_test_welch: TTest | null;
  pearson: number | null;
  pearson_n: number;
  incomplete: string[];
  unrated: string[];
  warnings: string[];
  per_image_correct: Record<string, number>;
  per_image_real_votes: Record<string, number>;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
  }
}

export function isDone(item: NextItem): item is SessionDone {
  return (item as SessionDone).done === true;
}

async function parseJson(resp: Response): Promise<unknown> {
  const text = await resp.text();
  try {
    return JSON.parse(text);
  } catch {
    throw new ApiError(resp.status, `invalid JSON from server (${resp.status})`);
  }
}

export class StudyApi {
  constructor(readonly base: string = "") {}

  private async request(
    method: string,
    path: string,
    body?: unknown,
    headers?: Record<string, string>,
  ): Promise<unknown> {
    const resp = await fetch(this.base + path, {
      method,
      headers: {
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
        ...(headers ?? {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload = await parseJson(resp);
    if (!resp.ok) {
      const message =
        typeof payload === "object" && payload !== null && "error" in payload
          ? String((payload as { error: unknown }).error)
          : `request failed (${resp.status})`;
      throw new ApiError(resp.status, message);
    }
    return payload;
  }

  async startSession(raterId: string): Promise<SessionInfo> {
    return (await this.request("POST", "/api/session", {
      rater_id: raterId,
    })) as SessionInfo;
  }

  async next(sessionId: string): Promise<NextItem> {
    return (await this.request(
      "GET",
      `/api/session/${encodeURIComponent(sessionId)}/next`,
    )) as NextItem;
  }

  async submitVerdict(
    sessionId: string,
    token: string,
    verdict: Verdict,
  ): Promise<void> {
    await this.request(
      "POST",
      `/api/session/${encodeURIComponent(sessionId)}/verdict`,
      { token, verdict },
    );
  }

  async report(adminToken: string): Promise<StudyReport> {
    return (await this.request("GET", "/api/report", undefined, {
      "X-Admin-Token": adminToken,
    })) as StudyReport;
  }
}
