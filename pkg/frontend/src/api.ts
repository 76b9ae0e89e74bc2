/**
 * Typed client for the rating service HTTP+JSON API.
 *
 * All payloads carry a version field "v"; this client speaks version 1
 * and refuses anything else rather than guessing at field meanings.
 */

export const API_VERSION = 1;

export interface StimulusRef {
  handle: string;
  audio_url: string;
}

export interface ScreenPayload {
  v: number;
  screen_index: number;
  total_screens: number;
  utterance_ref: StimulusRef;
  stimuli: StimulusRef[];
}

export interface CompletionPayload {
  v: number;
  complete: true;
  completion_code: string;
}

export type SessionState = ScreenPayload | CompletionPayload;

export interface ScoreEntry {
  handle: string;
  score: number;
}

export interface ProgressPayload {
  v: number;
  listeners_total: number;
  listeners_complete: number;
  screens_submitted: number;
  screens_total: number;
  ratings_recorded: number;
}

export function isComplete(state: SessionState): state is CompletionPayload {
  return "complete" in state && state.complete === true;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

/** The server expects a different screen than the one submitted. */
export class ConflictError extends ApiError {
  constructor(message: string, readonly expected?: number) {
    super(409, message);
    this.name = "ConflictError";
  }
}

async function errorMessage(response: Response): Promise<string> {
  try {
    const body = await response.json();
    if (body && typeof body.error === "string") return body.error;
  } catch {
    // non-JSON error body, fall through to the status line
  }
  return `HTTP ${response.status}`;
}

/** The slice of the API the session flow depends on; tests fake this. */
export interface SessionApi {
  getSession(token: string): Promise<SessionState>;
  submitRatings(token: string, screenIndex: number,
                scores: ScoreEntry[]): Promise<number>;
  fetchAudio(audioUrl: string): Promise<ArrayBuffer>;
}

export class RatingApi implements SessionApi {
  constructor(readonly baseUrl: string = "") {}

  private url(path: string): string {
    return this.baseUrl + path;
  }

  /** Current session state: the next unsubmitted screen, or completion. */
  async getSession(token: string): Promise<SessionState> {
    const response = await fetch(this.url(`/api/session/${encodeURIComponent(token)}`));
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    const state = (await response.json()) as SessionState;
    if (state.v !== API_VERSION) {
      throw new ApiError(200, `unsupported payload version ${state.v}`);
    }
    return state;
  }

  /**
   * Submit one screen's scores. Scores must be integers in [0, 100];
   * anything fractional is a caller bug, not something to round away.
   */
  async submitRatings(token: string, screenIndex: number,
                      scores: ScoreEntry[]): Promise<number> {
    for (const entry of scores) {
      if (!Number.isInteger(entry.score) || entry.score < 0 || entry.score > 100) {
        throw new Error(`score for ${entry.handle} is not an integer in [0, 100]`);
      }
    }
    const response = await fetch(this.url("/api/ratings"), {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        v: API_VERSION,
        listener_token: token,
        screen_index: screenIndex,
        scores,
      }),
    });
    if (response.status === 409) {
      const body = await response.json().catch(() => ({}));
      throw new ConflictError(
        typeof body.error === "string" ? body.error : "screen conflict",
        typeof body.expected === "number" ? body.expected : undefined,
      );
    }
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    const body = await response.json();
    return body.accepted as number;
  }

  async fetchAudio(audioUrl: string): Promise<ArrayBuffer> {
    const response = await fetch(this.url(audioUrl));
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    return response.arrayBuffer();
  }

  async getProgress(): Promise<ProgressPayload> {
    const response = await fetch(this.url("/api/progress"));
    if (!response.ok) {
      throw new ApiError(response.status, await errorMessage(response));
    }
    return (await response.json()) as ProgressPayload;
  }
}
