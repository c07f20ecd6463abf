/** Launches the primary command line and maps its exit codes.
 *
 * The command defaults to `python3 -m psf4d` and can be overridden
 * with the PSF4D_CMD environment variable (whitespace-separated).
 * Calls are asynchronous subprocesses, so no host-side lock is held
 * while the primary computes.
 */

import { execFile } from "node:child_process";

import { BindingError, ExecutionError, ValidationError } from "./errors.js";

const MAX_OUTPUT_BYTES = 64 * 1024 * 1024;

export function resolveCommand(): string[] {
  const override = process.env["PSF4D_CMD"];
  if (override !== undefined && override.trim() !== "") {
    return override.trim().split(/\s+/);
  }
  return ["python3", "-m", "psf4d"];
}

function primaryText(stderr: string, fallback: string): string {
  const lines = stderr
    .split("\n")
    .map((line) => line.trim())
    .filter((line) => line !== "");
  const last = lines[lines.length - 1];
  if (last === undefined) {
    return fallback;
  }
  return last.startsWith("error: ") ? last.slice("error: ".length) : last;
}

export interface CliResult {
  stdout: string;
  stderr: string;
}

/** Run one primary command, resolving with its captured output. */
export function runCli(args: string[], cwd?: string): Promise<CliResult> {
  const [command, ...prefix] = resolveCommand();
  if (command === undefined) {
    return Promise.reject(new BindingError("PSF4D_CMD resolved to nothing"));
  }
  return new Promise((resolve, reject) => {
    execFile(
      command,
      [...prefix, ...args],
      { cwd, maxBuffer: MAX_OUTPUT_BYTES },
      (error, stdout, stderr) => {
        if (error === null) {
          resolve({ stdout, stderr });
          return;
        }
        // exit status is a number; spawn failures carry a string errno
        const code = (error as { code?: number | string }).code;
        if (code === 2) {
          reject(new ValidationError(primaryText(stderr, error.message)));
        } else if (typeof code === "number") {
          reject(new ExecutionError(primaryText(stderr, error.message)));
        } else {
          reject(
            new BindingError(
              `cannot launch ${command}: ${error.message}; set PSF4D_CMD if the primary lives elsewhere`,
            ),
          );
        }
      },
    );
  });
}
