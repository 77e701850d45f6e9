/**
 * Drives one rater through a blinded session: fetch trial, collect a choice,
 * submit, repeat. Keeps a local record of what was submitted so an accidental
 * double submission is caught client-side, and maps the server's 409 to the
 * same "duplicate" outcome when a race slips past the local guard.
 */

import { ApiError, Choice, StudyApi, TrialPayload } from "./api.js";

export type SubmitOutcome =
  | { kind: "recorded"; trialsLeft: number }
  | { kind: "duplicate" };

export interface TrialRecord {
  trialId: string;
  chosen: Choice;
  magnification: number;
}

export class SessionRunner {
  readonly sessionId: string;
  readonly totalTrials: number;
  private submitted = new Map<string, Choice>();

  private constructor(private api: StudyApi, sessionId: string,
                      totalTrials: number) {
    this.sessionId = sessionId;
    this.totalTrials = totalTrials;
  }

  static async start(api: StudyApi, rater: string, condition: string,
                     seed: number, nTrials?: number): Promise<SessionRunner> {
    const info = await api.createSession(rater, condition, seed, nTrials);
    return new SessionRunner(api, info.session_id, info.total_trials);
  }

  get judgedCount(): number {
    return this.submitted.size;
  }

  records(): TrialRecord[] {
    return [...this.submitted.entries()].map(([trialId, chosen]) => ({
      trialId,
      chosen,
      magnification: 0,
    }));
  }

  /** Next blinded trial, or null when every trial has been judged. */
  nextTrial(): Promise<TrialPayload | null> {
    return this.api.nextTrial(this.sessionId);
  }

  async submit(trialId: string, chosen: Choice): Promise<SubmitOutcome> {
    if (this.submitted.has(trialId)) {
      return { kind: "duplicate" };
    }
    try {
      const reply = await this.api.submitJudgment(this.sessionId, trialId,
                                                  chosen);
      this.submitted.set(trialId, chosen);
      return { kind: "recorded", trialsLeft: reply.trials_left };
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        return { kind: "duplicate" };
      }
      throw err;
    }
  }

  /**
   * Force a raw submission past the local guard (used to prove the server's
   * own duplicate rejection). Returns the outcome without recording locally.
   */
  async submitUnguarded(trialId: string,
                        chosen: Choice): Promise<SubmitOutcome> {
    try {
      const reply = await this.api.submitJudgment(this.sessionId, trialId,
                                                  chosen);
      return { kind: "recorded", trialsLeft: reply.trials_left };
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        return { kind: "duplicate" };
      }
      throw err;
    }
  }
}
