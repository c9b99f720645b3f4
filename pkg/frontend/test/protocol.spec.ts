/**
 * Scripted end-to-end session against the real Python study service:
 * spawns the server on a demo study, drives the SessionFlow through all
 * ten images, audits every rater-facing response body for label leaks,
 * and checks the admin view model against the raw report JSON.
 */

import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { StudyApi } from "../src/api.js";
import { SessionFlow } from "../src/state.js";
import { reportView } from "../src/report.js";

const PY = process.env.PYTHON ?? "python3";
const REPO_ROOT = join(__dirname, "..", "..");
const PORT = 18000 + (process.pid % 2000);
const BASE = `http://127.0.0.1:${PORT}`;
const ADMIN_TOKEN = "demo-admin";

let studyDir: string;
let server: ChildProcess;
const transcript: string[] = [];

/** fetch wrapper recording every rater-facing response body. */
const realFetch = globalThis.fetch;
const auditedFetch: typeof fetch = async (input, init) => {
  const resp = await realFetch(input, init);
  const copy = resp.clone();
  transcript.push(await copy.text());
  return resp;
};

class AuditedApi extends StudyApi {
  // route the client through the transcript recorder
}

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 100; i += 1) {
    try {
      const resp = await fetch(`${BASE}/api/report`, {
        headers: { "X-Admin-Token": ADMIN_TOKEN },
      });
      if (resp.ok) return;
    } catch {
      // not up yet
    }
    await new Promise((r) => setTimeout(r, 150));
  }
  throw new Error("study server did not come up");
}

beforeAll(async () => {
  studyDir = mkdtempSync(join(tmpdir(), "rater-study-"));
  execFileSync(PY, [
    join(REPO_ROOT, "scripts", "make_study_demo.py"),
    "--out", studyDir, "--images", "10", "--admin-token", ADMIN_TOKEN,
  ], { stdio: "inherit" });
  server = spawn(PY, [
    "-m", "ulcerforge.cli", "study", "serve",
    "--out", studyDir, "--port", String(PORT),
    "--frontend", join(REPO_ROOT, "frontend", "public"),
  ], { stdio: "ignore" });
  await waitForServer();
}, 60_000);

afterAll(() => {
  server?.kill();
  rmSync(studyDir, { recursive: true, force: true });
});

describe("scripted browser session against the live service", () => {
  it("completes 10 images, stores exactly 10 verdicts, leaks no labels", async () => {
    globalThis.fetch = auditedFetch;
    try {
      const flow = new SessionFlow(new AuditedApi(BASE));
      await flow.start("scripted-rater");
      expect(flow.view.total).toBe(10);
      let safety = 0;
      while (flow.view.phase === "showing" && safety < 20) {
        safety += 1;
        // also audit the image bytes the browser would load
        const img = await fetch(BASE + flow.view.current!.image_url);
        expect(img.headers.get("content-type")).toBe("image/png");
        await flow.submit(safety % 2 ? "real" : "fake");
      }
      expect(flow.view.phase).toBe("done");
      expect(flow.view.submitted).toBe(10);
    } finally {
      globalThis.fetch = realFetch;
    }

    const logLines = readFileSync(join(studyDir, "verdicts.jsonl"), "utf-8")
      .trim()
      .split("\n");
    expect(logLines).toHaveLength(10);

    const blob = transcript.join("\n");
    expect(blob).not.toContain('"label"');
    expect(blob).not.toContain("synthetic");
    expect(blob).not.toContain(".png");
    expect(blob).not.toContain(studyDir);
  }, 30_000);

  it("rejects a duplicate verdict with 409 and the flow skips forward", async () => {
    const api = new StudyApi(BASE);
    const session = await api.startSession("scripted-rater");
    const item = await api.next(session.session_id);
    expect(item).toEqual({ done: true }); // everything already rated above
  });

  it("admin view model matches the service report JSON", async () => {
    const api = new StudyApi(BASE);
    const report = await api.report(ADMIN_TOKEN);
    const view = reportView(report);

    expect(view.markedRealPct).toBe(
      `${Math.round(report.fraction_marked_real * 100)}%`,
    );
    expect(view.realAccuracyPct).toBe(
      `${Math.round((report.real_accuracy ?? 0) * 100)}%`,
    );
    const histTotalReal = view.histogram.reduce((a, r) => a + r.real, 0);
    const histTotalSynth = view.histogram.reduce((a, r) => a + r.synthetic, 0);
    expect(histTotalReal).toBe(5);
    expect(histTotalSynth).toBe(5);
    expect(view.histogram).toHaveLength(report.raters_expected + 1);
  });

  it("report endpoint denies bad tokens", async () => {
    const resp = await fetch(`${BASE}/api/report`, {
      headers: { "X-Admin-Token": "wrong" },
    });
    expect(resp.status).toBe(403);
  });

  it("serves the frontend shell at /", async () => {
    const resp = await fetch(`${BASE}/`);
    expect(resp.status).toBe(200);
    const html = await resp.text();
    expect(html).toContain("Wound Rater");
  });
});
