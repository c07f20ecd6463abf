/** Node bindings for the psf4d toolkit.
 *
 * Every operation shells out to the primary command line and exchanges
 * tensors through its binary file format, so no numerical code lives on
 * this side and binding output is the primary's output. Data crosses
 * the process boundary by copy; arrays returned here are owned by the
 * caller.
 */

import { mkdtemp, readFile, rm, writeFile } from "node:fs/promises";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { BindingError, ValidationError } from "./errors.js";
import { decodeTensor, encodeTensor, type Tensor } from "./format.js";
import { ScheduleHandle, scheduleFlags, type ScheduleOptions } from "./handles.js";
import { runCli } from "./runner.js";

export {
  BindingError,
  ExecutionError,
  ReleasedHandleError,
  TensorFormatError,
  ValidationError,
} from "./errors.js";
export {
  decodeTensor,
  encodeTensor,
  tensorFrom,
  elementCount,
  type Tensor,
} from "./format.js";
export { ScheduleHandle, type ScheduleOptions } from "./handles.js";
export { resolveCommand, runCli } from "./runner.js";

/** AR coefficient used when none is given. */
export const DEFAULT_GAMMA = 0.65;
/** Cross-view shared-variance fraction used when none is given. */
export const DEFAULT_LAMBDA = 0.7;

async function withScratchDir<T>(fn: (dir: string) => Promise<T>): Promise<T> {
  const dir = await mkdtemp(join(tmpdir(), "psf4d-"));
  try {
    return await fn(dir);
  } finally {
    await rm(dir, { recursive: true, force: true });
  }
}

async function writeTensor(path: string, tensor: Tensor): Promise<void> {
  await writeFile(path, encodeTensor(tensor));
}

async function readTensor(path: string): Promise<Tensor> {
  return decodeTensor(await readFile(path));
}

function numberFlags(pairs: Record<string, number | string | undefined>): string[] {
  const flags: string[] = [];
  for (const [flag, value] of Object.entries(pairs)) {
    if (value !== undefined) {
      flags.push(flag, String(value));
    }
  }
  return flags;
}

export interface NoiseOptions {
  gamma?: number;
  lambda?: number;
  views?: number;
  windows?: number;
  framesPerWindow?: number;
  /** [channels, height, width]; shorthand for the three fields below. */
  shape?: readonly [number, number, number];
  channels?: number;
  height?: number;
  width?: number;
  seed?: number;
  epoch?: number;
  mode?: "independent_per_window" | "ar_chained";
}

export interface StructuredDraw extends Tensor {
  /** Sidecar description the primary wrote next to the tensor. */
  config: Record<string, unknown>;
}

/** Draw correlated noise: [views, windows, frames, channels, height, width]. */
export async function sampleStructured(
  options: NoiseOptions = {},
): Promise<StructuredDraw> {
  let { channels, height, width } = options;
  if (options.shape !== undefined) {
    if (channels !== undefined || height !== undefined || width !== undefined) {
      throw new ValidationError(
        "give either shape or channels/height/width, not both",
      );
    }
    [channels, height, width] = options.shape;
  }
  return withScratchDir(async (dir) => {
    const prefix = join(dir, "draw");
    await runCli([
      "sample-noise",
      ...numberFlags({
        "--gamma": options.gamma,
        "--lambda": options.lambda,
        "--views": options.views,
        "--windows": options.windows,
        "--frames": options.framesPerWindow,
        "--channels": channels,
        "--height": height,
        "--width": width,
        "--seed": options.seed,
        "--epoch": options.epoch,
        "--mode": options.mode,
      }),
      "--out", prefix,
    ]);
    const tensor = await readTensor(`${prefix}.psf4d`);
    const config = JSON.parse(
      await readFile(`${prefix}.json`, "utf8"),
    ) as Record<string, unknown>;
    return { ...tensor, config };
  });
}

/** Validate a time grid in the primary and keep its description. */
export async function makeSchedule(
  options: ScheduleOptions = {},
): Promise<ScheduleHandle> {
  const dir = await mkdtemp(join(tmpdir(), "psf4d-sched-"));
  try {
    const path = join(dir, "schedule.json");
    const { stdout } = await runCli([
      "schedule-export", ...scheduleFlags(options), "--out", path, "--json",
    ]);
    const record = JSON.parse(stdout) as { members: number[] };
    return new ScheduleHandle(options, record.members, path, dir);
  } catch (error) {
    await rm(dir, { recursive: true, force: true });
    throw error;
  }
}

export interface PredictorOptions {
  predictor?: "oracle" | "zero";
  /** Oracle prior mean; primary default 0.3. */
  mu?: number;
  /** Oracle prior variance; primary default 0.25. */
  sigma2?: number;
}

function predictorFlags(options: PredictorOptions): string[] {
  return numberFlags({
    "--predictor": options.predictor,
    "--mu": options.mu,
    "--sigma2": options.sigma2,
  });
}

/** Closed-form jump of a clean tensor to timestep `t` with given noise. */
export async function forwardDiffuse(
  schedule: ScheduleHandle,
  z0: Tensor,
  t: number,
  eps: Tensor,
): Promise<Tensor> {
  return withScratchDir(async (dir) => {
    await writeTensor(join(dir, "z0.psf4d"), z0);
    await writeTensor(join(dir, "eps.psf4d"), eps);
    await runCli([
      "forward-diffuse", ...schedule.flags(),
      "--in", join(dir, "z0.psf4d"),
      "--noise", join(dir, "eps.psf4d"),
      "--t", String(t),
      "--out", join(dir, "out.psf4d"),
    ]);
    return readTensor(join(dir, "out.psf4d"));
  });
}

async function ddimMove(
  schedule: ScheduleHandle,
  z: Tensor,
  op: "step" | "sample" | "invert",
  endpoints: { from?: number; to?: number },
  options: PredictorOptions,
): Promise<Tensor> {
  return withScratchDir(async (dir) => {
    await writeTensor(join(dir, "z.psf4d"), z);
    await runCli([
      "ddim-move", ...schedule.flags(), ...predictorFlags(options),
      "--op", op,
      "--in", join(dir, "z.psf4d"),
      ...numberFlags({ "--from": endpoints.from, "--to": endpoints.to }),
      "--out", join(dir, "out.psf4d"),
    ]);
    return readTensor(join(dir, "out.psf4d"));
  });
}

/** One deterministic update hop from `tFrom` to `tTo` (either direction). */
export async function ddimStep(
  schedule: ScheduleHandle,
  z: Tensor,
  tFrom: number,
  tTo: number,
  options: PredictorOptions = {},
): Promise<Tensor> {
  return ddimMove(schedule, z, "step", { from: tFrom, to: tTo }, options);
}

/** Denoise along the sub-schedule from `fromT` (default T) down to 0. */
export async function ddimSample(
  schedule: ScheduleHandle,
  z: Tensor,
  options: PredictorOptions & { fromT?: number } = {},
): Promise<Tensor> {
  return ddimMove(schedule, z, "sample", { from: options.fromT }, options);
}

/** Re-noise along the sub-schedule from 0 up to `toT` (default T). */
export async function ddimInvert(
  schedule: ScheduleHandle,
  z: Tensor,
  options: PredictorOptions & { toT?: number } = {},
): Promise<Tensor> {
  return ddimMove(schedule, z, "invert", { to: options.toT }, options);
}

/** Invert then denoise `z0`; returns the max absolute recovery error. */
export async function ddimRoundtrip(
  schedule: ScheduleHandle,
  z0: Tensor,
  steps?: number,
  options: PredictorOptions = {},
): Promise<number> {
  return withScratchDir(async (dir) => {
    await writeTensor(join(dir, "z0.psf4d"), z0);
    const { stdout } = await runCli([
      "ddim-roundtrip", ...schedule.flags(), ...predictorFlags(options),
      // a trailing repeat wins in the primary's parser
      ...(steps === undefined ? [] : ["--ddim-steps", String(steps)]),
      "--in", join(dir, "z0.psf4d"),
      "--json",
    ]);
    const record = JSON.parse(stdout) as { max_abs_error: number };
    if (typeof record.max_abs_error !== "number") {
      throw new BindingError("primary returned no max_abs_error field");
    }
    return record.max_abs_error;
  });
}

/** Affine blend: omega * denoised + (1 - omega) * previous. */
export async function rectify(
  denoised: Tensor,
  previous: Tensor,
  omega: number,
): Promise<Tensor> {
  return withScratchDir(async (dir) => {
    await writeTensor(join(dir, "denoised.psf4d"), denoised);
    await writeTensor(join(dir, "previous.psf4d"), previous);
    await runCli([
      "rectify",
      "--denoised", join(dir, "denoised.psf4d"),
      "--previous", join(dir, "previous.psf4d"),
      "--omega", String(omega),
      "--out", join(dir, "out.psf4d"),
    ]);
    return readTensor(join(dir, "out.psf4d"));
  });
}
