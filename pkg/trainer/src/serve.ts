/** Newline-delimited JSON evaluation service.
 *
 * One request per line on stdin, exactly one response per request on
 * stdout, matched by id. A line that is not valid JSON gets an error
 * response with id "unknown"; everything else that goes wrong with a
 * request (bad mode, unbuildable graph, training failure) gets an error
 * response carrying the request's id. The loop never dies on bad input;
 * it ends at EOF.
 */

import * as readline from "readline";
import { ArchDocument, BuildError, inputShape, numClasses, parseArchitecture } from "./arch";
import { buildNetwork, Network } from "./build";
import { DatasetCache } from "./dataset";
import { deriveSeed } from "./rng";
import { KdTeacher, trainAndScore, trainInto } from "./train";

export interface AdapterConfig {
  seed: number;
  proxyEpochs: number;
  fullEpochs: number;
  dataset: "synthetic";
  device: "cpu";
  learningRate: number;
  kd: boolean;
  /** architecture document for the distillation teacher; required iff kd */
  kdTeacher: ArchDocument | null;
}

export const DEFAULT_CONFIG: AdapterConfig = {
  seed: 0,
  proxyEpochs: 10,
  fullEpochs: 60,
  dataset: "synthetic",
  device: "cpu",
  learningRate: 0.01,
  kd: false,
  kdTeacher: null,
};

interface Response {
  id: string;
  status: "ok" | "error";
  accuracy?: number;
  message?: string;
}

/** JSON with object keys sorted at every level, so equal payloads map to
 * equal training seeds regardless of key order on the wire. */
export function canonicalJson(value: unknown): string {
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  if (typeof value === "object" && value !== null) {
    const obj = value as Record<string, unknown>;
    const parts = Object.keys(obj)
      .sort()
      .map((k) => JSON.stringify(k) + ":" + canonicalJson(obj[k]));
    return "{" + parts.join(",") + "}";
  }
  return JSON.stringify(value);
}

const KD_TEMPERATURE = 4;
const KD_WEIGHT = 0.9;

export class RequestHandler {
  private datasets: DatasetCache;
  private kdTeachers = new Map<string, Network>();

  constructor(private cfg: AdapterConfig) {
    this.datasets = new DatasetCache(cfg.seed);
  }

  handleLine(line: string): Response | null {
    const trimmed = line.trim();
    if (!trimmed) return null;
    let doc: unknown;
    try {
      doc = JSON.parse(trimmed);
    } catch {
      return { id: "unknown", status: "error", message: "request line is not valid JSON" };
    }
    if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
      return { id: "unknown", status: "error", message: "request must be a JSON object" };
    }
    const req = doc as Record<string, unknown>;
    const id =
      typeof req.id === "string" || typeof req.id === "number" ? String(req.id) : "unknown";
    try {
      return { id, status: "ok", accuracy: this.evaluate(req) };
    } catch (err) {
      const message = err instanceof Error ? err.message : String(err);
      return { id, status: "error", message };
    }
  }

  private evaluate(req: Record<string, unknown>): number {
    const mode = req.mode;
    if (mode !== "proxy" && mode !== "full") {
      throw new BuildError(`mode must be "proxy" or "full", got ${JSON.stringify(mode)}`);
    }
    let epochs = mode === "proxy" ? this.cfg.proxyEpochs : this.cfg.fullEpochs;
    if (req.epochs !== undefined) {
      if (typeof req.epochs !== "number" || !Number.isInteger(req.epochs) || req.epochs < 1) {
        throw new BuildError(`epochs must be a positive integer, got ${JSON.stringify(req.epochs)}`);
      }
      epochs = req.epochs;
    }
    const arch = parseArchitecture(req.architecture);
    const [spatial, , channels] = inputShape(arch);
    const classes = numClasses(arch);
    const ds = this.datasets.get(channels, spatial, classes);
    // seed from the payload, not arrival order: identical requests under a
    // fixed adapter seed must yield identical accuracies
    const seed = deriveSeed(
      this.cfg.seed,
      `${mode}/${epochs}/` + canonicalJson(req.architecture),
    );
    return trainAndScore(arch, ds, {
      epochs,
      seed,
      learningRate: this.cfg.learningRate,
      kd: this.kdFor(channels, spatial, classes),
    });
  }

  /** Train (once per input shape) and cache the distillation teacher. */
  private kdFor(channels: number, spatial: number, classes: number): KdTeacher | null {
    if (!this.cfg.kd) return null;
    const teacherArch = this.cfg.kdTeacher;
    if (!teacherArch) throw new BuildError("kd enabled but no teacher architecture configured");
    const [tSpatial, , tChannels] = inputShape(teacherArch);
    if (tSpatial !== spatial || tChannels !== channels || numClasses(teacherArch) !== classes) {
      throw new BuildError(
        `kd teacher expects ${tChannels}x${tSpatial} -> ${numClasses(teacherArch)} classes, ` +
          `request needs ${channels}x${spatial} -> ${classes}`,
      );
    }
    const key = `${channels}x${spatial}x${classes}`;
    let net = this.kdTeachers.get(key);
    if (!net) {
      const ds = this.datasets.get(channels, spatial, classes);
      net = buildNetwork(teacherArch, deriveSeed(this.cfg.seed, "kd-teacher"));
      trainInto(net, ds, {
        epochs: this.cfg.fullEpochs,
        seed: deriveSeed(this.cfg.seed, "kd-teacher-train"),
        learningRate: this.cfg.learningRate,
      });
      this.kdTeachers.set(key, net);
    }
    return { net, temperature: KD_TEMPERATURE, weight: KD_WEIGHT };
  }

  dispose(): void {
    for (const net of this.kdTeachers.values()) net.dispose();
    this.kdTeachers.clear();
    this.datasets.dispose();
  }
}

export function serve(
  input: NodeJS.ReadableStream,
  output: NodeJS.WritableStream,
  cfg: AdapterConfig,
): Promise<void> {
  const handler = new RequestHandler(cfg);
  const rl = readline.createInterface({ input, crlfDelay: Infinity });
  return new Promise((resolve) => {
    rl.on("line", (line) => {
      const response = handler.handleLine(line);
      if (response) output.write(JSON.stringify(response) + "\n");
    });
    rl.on("close", () => {
      handler.dispose();
      resolve();
    });
  });
}
