/**
 * View layer: pure zoom/pan state math and stats-table shaping (unit-tested
 * headlessly), plus the DOM wiring that presents two synchronized panes and
 * records a left/right choice per trial.
 */

import { Choice, StatsTable, StudyApi, TrialPayload } from "./api.js";
import { SessionRunner } from "./session.js";

// ---- pure geometry -----------------------------------------------------------

export interface ZoomPan {
  scale: number;
  x: number;
  y: number;
}

export const ZOOM_MIN = 0.25;
export const ZOOM_MAX = 32;
export const HOME: ZoomPan = { scale: 1, x: 0, y: 0 };

/**
 * Zoom by `factor` keeping the view point (cx, cy) fixed on screen.
 * The screen position of an image point p is p*scale + offset, so holding
 * (cx, cy) fixed requires offset' = c - (c - offset) * (scale'/scale).
 */
export function applyZoom(state: ZoomPan, factor: number, cx: number,
                          cy: number): ZoomPan {
  const scale = Math.min(ZOOM_MAX, Math.max(ZOOM_MIN, state.scale * factor));
  const ratio = scale / state.scale;
  return {
    scale,
    x: cx - (cx - state.x) * ratio,
    y: cy - (cy - state.y) * ratio,
  };
}

export function applyPan(state: ZoomPan, dx: number, dy: number): ZoomPan {
  return { scale: state.scale, x: state.x + dx, y: state.y + dy };
}

export function transformStyle(state: ZoomPan): string {
  return `translate(${state.x}px, ${state.y}px) scale(${state.scale})`;
}

// ---- pure stats shaping ------------------------------------------------------

function fmt(value: number | null): string {
  return value === null ? "-" : value.toFixed(4);
}

/**
 * Flatten a stats table into display rows (header, one row per rater, then a
 * totals row) so the DOM layer and the tests share one formatting path.
 */
export function statsRowsToCells(table: StatsTable): string[][] {
  const cells: string[][] = [
    ["rater", "tp", "fp", "n", "p", "deviation"],
  ];
  for (const row of table.rows) {
    cells.push([row.rater, String(row.tp), String(row.fp), String(row.n),
                fmt(row.p), fmt(row.deviation)]);
  }
  const t = table.totals;
  cells.push(["total", String(t.tp), String(t.fp), String(t.n),
              fmt(t.pooled_p), fmt(t.weighted_deviation)]);
  return cells;
}

// ---- DOM wiring --------------------------------------------------------------

export interface StudyElements {
  root: HTMLElement;
  status: HTMLElement;
  leftImg: HTMLImageElement;
  rightImg: HTMLImageElement;
  table: HTMLTableElement;
}

function el<K extends keyof HTMLElementTagNameMap>(
    doc: Document, tag: K, className?: string): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  return node;
}

export function buildLayout(doc: Document, root: HTMLElement): StudyElements {
  root.innerHTML = "";
  const status = el(doc, "div", "status");
  const panes = el(doc, "div", "panes");
  const leftImg = el(doc, "img", "pane");
  const rightImg = el(doc, "img", "pane");
  leftImg.draggable = false;
  rightImg.draggable = false;
  panes.append(leftImg, rightImg);
  const help = el(doc, "div", "help");
  help.textContent =
    "Pick the image that looks real: click a pane or press ←/→. " +
    "Zoom with +/- or the mouse wheel, drag to pan, 0 resets the view.";
  const table = el(doc, "table", "stats");
  root.append(status, panes, help, table);
  return { root, status, leftImg, rightImg, table };
}

export function renderStats(doc: Document, table: HTMLTableElement,
                            stats: StatsTable): void {
  table.innerHTML = "";
  for (const [i, rowCells] of statsRowsToCells(stats).entries()) {
    const tr = el(doc, "tr");
    for (const cell of rowCells) {
      const td = el(doc, i === 0 ? "th" : "td");
      td.textContent = cell;
      tr.append(td);
    }
    table.append(tr);
  }
}

export interface MountOptions {
  api: StudyApi;
  rater: string;
  condition: string;
  seed: number;
  nTrials?: number;
}

/**
 * Run a full blinded session in the page. Both panes share one zoom/pan
 * state so the rater always compares the same region at the same scale.
 */
export async function mountStudy(doc: Document, root: HTMLElement,
                                 opts: MountOptions): Promise<void> {
  const ui = buildLayout(doc, root);
  const runner = await SessionRunner.start(opts.api, opts.rater,
                                           opts.condition, opts.seed,
                                           opts.nTrials);
  let view = HOME;
  let trial: TrialPayload | null = null;
  let dragging = false;
  let dragDistance = 0;
  let lastX = 0;
  let lastY = 0;

  const applyView = () => {
    ui.leftImg.style.transform = transformStyle(view);
    ui.rightImg.style.transform = transformStyle(view);
  };

  const showTrial = async () => {
    trial = await runner.nextTrial();
    if (trial === null) {
      ui.status.textContent = "Session complete.";
      ui.leftImg.removeAttribute("src");
      ui.rightImg.removeAttribute("src");
      renderStats(doc, ui.table, await opts.api.stats(opts.condition));
      return;
    }
    ui.status.textContent =
      `Trial ${runner.judgedCount + 1} of ${runner.totalTrials} ` +
      `(magnification level ${trial.magnification})`;
    ui.leftImg.src = opts.api.resolve(trial.left_image_url);
    ui.rightImg.src = opts.api.resolve(trial.right_image_url);
    view = HOME;
    applyView();
  };

  const choose = async (chosen: Choice) => {
    if (trial === null || dragDistance > 5) return;
    const current = trial;
    trial = null; // ignore further input until the next trial is up
    const outcome = await runner.submit(current.trial_id, chosen);
    if (outcome.kind === "duplicate") {
      ui.status.textContent = "That trial was already judged.";
    }
    await showTrial();
  };

  ui.leftImg.addEventListener("click", () => void choose("left"));
  ui.rightImg.addEventListener("click", () => void choose("right"));

  doc.addEventListener("keydown", (ev: KeyboardEvent) => {
    if (ev.key === "ArrowLeft") void choose("left");
    else if (ev.key === "ArrowRight") void choose("right");
    else if (ev.key === "+" || ev.key === "=") {
      view = applyZoom(view, 1.25, 0, 0);
      applyView();
    } else if (ev.key === "-") {
      view = applyZoom(view, 0.8, 0, 0);
      applyView();
    } else if (ev.key === "0") {
      view = HOME;
      applyView();
    }
  });

  for (const pane of [ui.leftImg, ui.rightImg]) {
    pane.addEventListener("wheel", (ev: WheelEvent) => {
      ev.preventDefault();
      const rect = pane.getBoundingClientRect();
      view = applyZoom(view, ev.deltaY < 0 ? 1.25 : 0.8,
                       ev.clientX - rect.left, ev.clientY - rect.top);
      applyView();
    });
    pane.addEventListener("pointerdown", (ev: PointerEvent) => {
      dragging = true;
      dragDistance = 0;
      lastX = ev.clientX;
      lastY = ev.clientY;
    });
  }
  doc.addEventListener("pointermove", (ev: PointerEvent) => {
    if (!dragging) return;
    const dx = ev.clientX - lastX;
    const dy = ev.clientY - lastY;
    dragDistance += Math.abs(dx) + Math.abs(dy);
    view = applyPan(view, dx, dy);
    lastX = ev.clientX;
    lastY = ev.clientY;
    applyView();
  });
  doc.addEventListener("pointerup", () => {
    dragging = false;
  });

  await showTrial();
}
