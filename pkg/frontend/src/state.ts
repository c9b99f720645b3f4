/**
 * Session state machine: loading -> showing -> submitting -> showing | done.
 *
 * Forward-only: exactly one verdict per displayed image, no revision.
 * A submit while another is in flight is ignored, and a 409 conflict
 * (image already rated) skips forward with a notice instead of failing.
 */

import { ApiError, NextImage, StudyApi, Verdict, isDone } from "./api.js";

export type Phase =
  | "idle"
  | "loading"
  | "showing"
  | "submitting"
  | "done"
  | "error";

export interface SessionViewState {
  phase: Phase;
  sessionId: string | null;
  raterId: string | null;
  current: NextImage | null;
  submitted: number;
  total: number;
  notice: string | null;
  error: string | null;
}

export type Listener = (state: SessionViewState) => void;

const INITIAL: SessionViewState = {
  phase: "idle",
  sessionId: null,
  raterId: null,
  current: null,
  submitted: 0,
  total: 0,
  notice: null,
  error: null,
};

export class SessionFlow {
  private state: SessionViewState = { ...INITIAL };
  private listeners: Listener[] = [];

  constructor(private readonly api: StudyApi) {}

  get view(): SessionViewState {
    return this.state;
  }

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
    listener(this.state);
  }

  private update(patch: Partial<SessionViewState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.state);
  }

  /** Create a session and show the first image (or the done screen). */
  async start(raterId: string): Promise<void> {
    const trimmed = raterId.trim();
    if (!trimmed) {
      this.update({ phase: "idle", error: "enter a rater id first" });
      return;
    }
    this.update({ phase: "loading", raterId: trimmed, error: null, notice: null });
    try {
      const session = await this.api.startSession(trimmed);
      this.update({ sessionId: session.session_id, total: session.total });
      await this.advance();
    } catch (err) {
      // no partial session state survives a failed start
      this.state = { ...INITIAL };
      this.update({ phase: "error", error: describe(err) });
    }
  }

  private async advance(): Promise<void> {
    if (this.state.sessionId === null) return;
    const item = await this.api.next(this.state.sessionId);
    if (isDone(item)) {
      this.update({ phase: "done", current: null });
      return;
    }
    this.update({
      phase: "showing",
      current: item,
      submitted: item.index - 1,
      total: item.total,
    });
  }

  /** Submit the verdict for the displayed image and move forward. */
  async submit(verdict: Verdict): Promise<void> {
    if (this.state.phase !== "showing" || this.state.current === null) {
      return; // ignores double-clicks while a submission is in flight
    }
    const current = this.state.current;
    this.update({ phase: "submitting", notice: null });
    try {
      await this.api.submitVerdict(this.state.sessionId!, current.token, verdict);
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.update({ notice: "image was already rated; skipping forward" });
      } else {
        this.update({ phase: "showing", error: describe(err) });
        return;
      }
    }
    this.update({ submitted: this.state.submitted + 1, error: null });
    try {
      await this.advance();
    } catch (err) {
      this.update({ phase: "error", error: describe(err) });
    }
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.message} (HTTP ${err.status})`;
  if (err instanceof Error) return err.message;
  return String(err);
}
