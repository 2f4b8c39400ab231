#!/usr/bin/env node
/** CLI entry: parse flags, pin the cpu backend, serve stdin until EOF.
 *
 * Meant to be launched by the search engine as
 *   esnac search ... --backend "external:node dist/main.js --seed 7"
 * but it runs fine standalone for debugging: type a request, read a reply.
 */

import * as fs from "fs";
import * as tf from "@tensorflow/tfjs";
import { parseArchitecture } from "./arch";
import { AdapterConfig, DEFAULT_CONFIG, serve } from "./serve";

class UsageError extends Error {}

function intArg(value: string | undefined, flag: string, min: number): number {
  const n = Number(value);
  if (value === undefined || !Number.isInteger(n) || n < min) {
    throw new UsageError(`${flag} needs an integer >= ${min}`);
  }
  return n;
}

export function parseArgs(argv: string[]): AdapterConfig {
  const cfg: AdapterConfig = { ...DEFAULT_CONFIG };
  let teacherPath: string | null = null;
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    switch (flag) {
      case "--seed":
        cfg.seed = intArg(argv[++i], flag, 0);
        break;
      case "--proxy-epochs":
        cfg.proxyEpochs = intArg(argv[++i], flag, 1);
        break;
      case "--full-epochs":
        cfg.fullEpochs = intArg(argv[++i], flag, 1);
        break;
      case "--lr": {
        const lr = Number(argv[++i]);
        if (!(lr > 0)) throw new UsageError("--lr needs a positive number");
        cfg.learningRate = lr;
        break;
      }
      case "--dataset":
        if (argv[++i] !== "synthetic") {
          throw new UsageError('only the built-in "synthetic" dataset is available');
        }
        break;
      case "--device":
        if (argv[++i] !== "cpu") {
          throw new UsageError('only the "cpu" device is available in this build');
        }
        break;
      case "--kd":
        cfg.kd = true;
        break;
      case "--teacher":
        teacherPath = argv[++i];
        if (teacherPath === undefined) throw new UsageError("--teacher needs a path");
        break;
      default:
        throw new UsageError(`unknown flag ${flag}`);
    }
  }
  if (cfg.kd) {
    if (!teacherPath) throw new UsageError("--kd requires --teacher <architecture.json>");
    cfg.kdTeacher = parseArchitecture(JSON.parse(fs.readFileSync(teacherPath, "utf8")));
  }
  return cfg;
}

async function main(): Promise<void> {
  let cfg: AdapterConfig;
  try {
    cfg = parseArgs(process.argv.slice(2));
  } catch (err) {
    process.stderr.write(`esnac-trainer: ${err instanceof Error ? err.message : err}\n`);
    process.exit(2);
  }
  await tf.setBackend("cpu");
  await tf.ready();
  await serve(process.stdin, process.stdout, cfg);
}

if (require.main === module) {
  main().then(
    () => process.exit(0),
    (err) => {
      process.stderr.write(`esnac-trainer: ${err instanceof Error ? err.stack : err}\n`);
      process.exit(1);
    },
  );
}
