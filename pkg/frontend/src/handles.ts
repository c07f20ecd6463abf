/** Opaque handles over primary-side objects with explicit lifetimes.
 *
 * A handle owns a scratch directory holding the primary's serialized
 * description of the object. `release()` deletes it; any use after
 * release, including a second release, raises {@link ReleasedHandleError}
 * rather than touching dead state. Handles are plain objects with no
 * internal locking: do not share one across worker threads without
 * external synchronization.
 */

import { rmSync } from "node:fs";

import { ReleasedHandleError } from "./errors.js";

export interface ScheduleOptions {
  timesteps?: number;
  ddimSteps?: number;
  kind?: "linear" | "scaled_linear";
  betaStart?: number;
  betaEnd?: number;
}

const SCHEDULE_DEFAULTS = {
  timesteps: 1000,
  ddimSteps: 30,
  kind: "linear" as const,
  betaStart: 1e-4,
  betaEnd: 0.02,
};

/** Command-line flags reproducing `options` in the primary. */
export function scheduleFlags(options: ScheduleOptions): string[] {
  return [
    "--timesteps", String(options.timesteps ?? SCHEDULE_DEFAULTS.timesteps),
    "--ddim-steps", String(options.ddimSteps ?? SCHEDULE_DEFAULTS.ddimSteps),
    "--kind", options.kind ?? SCHEDULE_DEFAULTS.kind,
    "--beta-start", String(options.betaStart ?? SCHEDULE_DEFAULTS.betaStart),
    "--beta-end", String(options.betaEnd ?? SCHEDULE_DEFAULTS.betaEnd),
  ];
}

/** Validated diffusion time grid, exported by the primary. */
export class ScheduleHandle {
  readonly timesteps: number;
  readonly ddimSteps: number;
  readonly kind: "linear" | "scaled_linear";
  readonly betaStart: number;
  readonly betaEnd: number;
  /** Sub-schedule members, strictly increasing, ending at `timesteps`. */
  readonly members: readonly number[];
  /** Path of the exported schedule description file. */
  readonly descriptionPath: string;

  private readonly scratchDir: string;
  private released = false;

  constructor(
    options: ScheduleOptions,
    members: readonly number[],
    descriptionPath: string,
    scratchDir: string,
  ) {
    this.timesteps = options.timesteps ?? SCHEDULE_DEFAULTS.timesteps;
    this.ddimSteps = options.ddimSteps ?? SCHEDULE_DEFAULTS.ddimSteps;
    this.kind = options.kind ?? SCHEDULE_DEFAULTS.kind;
    this.betaStart = options.betaStart ?? SCHEDULE_DEFAULTS.betaStart;
    this.betaEnd = options.betaEnd ?? SCHEDULE_DEFAULTS.betaEnd;
    this.members = [...members];
    this.descriptionPath = descriptionPath;
    this.scratchDir = scratchDir;
  }

  get isReleased(): boolean {
    return this.released;
  }

  /** Command-line flags reproducing this schedule in the primary. */
  flags(): string[] {
    this.assertLive();
    return scheduleFlags(this);
  }

  assertLive(): void {
    if (this.released) {
      throw new ReleasedHandleError("schedule handle used after release");
    }
  }

  /** Free the handle's scratch state. Further use raises. */
  release(): void {
    if (this.released) {
      throw new ReleasedHandleError("schedule handle released twice");
    }
    this.released = true;
    rmSync(this.scratchDir, { recursive: true, force: true });
  }
}
