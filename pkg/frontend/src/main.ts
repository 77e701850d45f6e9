/**
 * Browser entry point. Reads the study parameters from the query string and
 * mounts the session UI, e.g.:
 *
 *   index.html?api=http://localhost:8008&rater=r1&condition=patch-level&seed=7
 */

import { StudyApi } from "./api.js";
import { mountStudy } from "./view.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

async function start(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  const api = new StudyApi(param("api", "http://localhost:8008"));
  const trialsRaw = param("trials", "");
  try {
    await mountStudy(document, root, {
      api,
      rater: param("rater", "anonymous"),
      condition: param("condition", "patch-level"),
      seed: Number(param("seed", "0")),
      nTrials: trialsRaw ? Number(trialsRaw) : undefined,
    });
  } catch (err) {
    root.textContent = `Failed to start session: ${String(err)}`;
    throw err;
  }
}

void start();
