/** Conformance of the served protocol: one well-formed response per
 * request, matched by id, accuracies in range, bad lines survived. Runs
 * against the compiled entry point the way the engine launches it. */

import { describe, expect, it } from "vitest";
import { spawn } from "child_process";
import * as path from "path";
import * as readline from "readline";
import { chainTeacher } from "./graphs";

const MAIN = path.join(__dirname, "..", "dist", "main.js");

interface Scripted {
  line: string;
  kind: "valid" | "invalid" | "malformed";
  id: string;
}

function request(id: string, architecture: unknown, epochs = 1, mode = "proxy"): string {
  return JSON.stringify({ id, mode, epochs, architecture });
}

function buildScript(): Scripted[] {
  const script: Scripted[] = [];
  const widthPairs: [number, number][] = [
    [8, 16], [4, 8], [6, 12], [2, 4], [3, 6], [8, 8], [4, 12], [5, 10],
  ];
  // 38 valid requests cycling over a few widths, both modes
  for (let i = 0; i < 38; i++) {
    const widths = widthPairs[i % widthPairs.length];
    const mode = i % 5 === 4 ? "full" : "proxy";
    const id = `v${i}`;
    script.push({ line: request(id, chainTeacher(widths), 1, mode), kind: "valid", id });
  }
  // 7 invalid requests: unbuildable graphs or bad fields, each still a
  // parsable JSON object that must be answered with status "error"
  const badFormat = chainTeacher();
  badFormat.format = "archgraph/9";
  const badType = chainTeacher();
  badType.nodes[2].layer_type = "swish";
  const badDims = chainTeacher();
  badDims.nodes[4].in_channels = 7;
  const dangling = chainTeacher();
  dangling.edges = dangling.edges.slice(0, 3);
  script.push({ line: request("i0", badFormat), kind: "invalid", id: "i0" });
  script.push({ line: request("i1", badType), kind: "invalid", id: "i1" });
  script.push({ line: request("i2", badDims), kind: "invalid", id: "i2" });
  script.push({ line: request("i3", dangling), kind: "invalid", id: "i3" });
  script.push({ line: request("i4", null), kind: "invalid", id: "i4" });
  script.push({
    line: JSON.stringify({ id: "i5", mode: "warp", epochs: 1, architecture: chainTeacher() }),
    kind: "invalid",
    id: "i5",
  });
  script.push({
    line: JSON.stringify({ id: "i6", mode: "proxy", epochs: 0, architecture: chainTeacher() }),
    kind: "invalid",
    id: "i6",
  });
  // 5 malformed lines: not JSON objects at all
  const garbage = ["not json", "{\"id\": \"x\"", "[1, 2, 3]", "42", "\"quoted\""];
  for (const g of garbage) script.push({ line: g, kind: "malformed", id: "unknown" });
  return script;
}

describe("protocol conformance", () => {
  it("answers 50 scripted requests with exactly one well-formed response each", async () => {
    const script = buildScript();
    expect(script.length).toBe(50);

    const child = spawn("node", [MAIN, "--seed", "0"], {
      stdio: ["pipe", "pipe", "pipe"],
    });
    const responses: Record<string, unknown>[] = [];
    const rl = readline.createInterface({ input: child.stdout });
    const done = new Promise<void>((resolve, reject) => {
      rl.on("line", (line) => {
        responses.push(JSON.parse(line));
        if (responses.length === script.length) resolve();
      });
      child.on("error", reject);
      child.on("exit", (code) => {
        if (responses.length < script.length) {
          reject(new Error(`adapter exited with ${code} after ${responses.length} responses`));
        }
      });
    });
    for (const item of script) child.stdin.write(item.line + "\n");
    child.stdin.write("\n");
    await done;
    child.stdin.end();
    await new Promise((resolve) => child.on("close", resolve));

    expect(responses.length).toBe(50);
    const seen = new Map<string, number>();
    for (const r of responses) {
      expect(typeof r.id).toBe("string");
      expect(["ok", "error"]).toContain(r.status);
      if (r.status === "ok") {
        expect(typeof r.accuracy).toBe("number");
        expect(r.accuracy as number).toBeGreaterThanOrEqual(0);
        expect(r.accuracy as number).toBeLessThanOrEqual(1);
      } else {
        expect(typeof r.message).toBe("string");
      }
      seen.set(r.id as string, (seen.get(r.id as string) ?? 0) + 1);
    }
    for (const item of script) {
      if (item.kind === "malformed") continue;
      expect(seen.get(item.id), `id ${item.id}`).toBe(1);
      const resp = responses.find((r) => r.id === item.id)!;
      expect(resp.status).toBe(item.kind === "valid" ? "ok" : "error");
    }
    // the five malformed lines each get an id "unknown" error
    expect(seen.get("unknown")).toBe(5);
  }, 600000);

  it("identical payloads yield identical accuracies", async () => {
    const child = spawn("node", [MAIN, "--seed", "3"], {
      stdio: ["pipe", "pipe", "pipe"],
    });
    const rl = readline.createInterface({ input: child.stdout });
    const responses: Record<string, unknown>[] = [];
    const done = new Promise<void>((resolve) => {
      rl.on("line", (line) => {
        responses.push(JSON.parse(line));
        if (responses.length === 3) resolve();
      });
    });
    const arch = chainTeacher([4, 8]);
    child.stdin.write(request("a", arch) + "\n");
    child.stdin.write(request("b", arch) + "\n");
    child.stdin.write(request("c", chainTeacher([6, 12])) + "\n");
    await done;
    child.stdin.end();
    await new Promise((resolve) => child.on("close", resolve));

    const byId = Object.fromEntries(responses.map((r) => [r.id, r]));
    expect(byId.a.status).toBe("ok");
    expect(byId.a.accuracy).toBe(byId.b.accuracy);
    expect(byId.c.status).toBe("ok");
  }, 120000);

  it("rejects unusable flags before serving", async () => {
    const child = spawn("node", [MAIN, "--device", "tpu"], {
      stdio: ["pipe", "pipe", "pipe"],
    });
    let stderr = "";
    child.stderr.on("data", (chunk) => (stderr += chunk));
    const code: number = await new Promise((resolve) => child.on("exit", resolve));
    expect(code).toBe(2);
    expect(stderr).toContain("cpu");
  });
});
