/** Canvas rendering + pointer gestures for drawing line boxes. */

import type { Box } from "./types.js";
import type { LineDraft, SessionState } from "./session.js";
import { normalizeDrag } from "./session.js";

export interface DragState {
  active: boolean;
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export function emptyDrag(): DragState {
  return { active: false, x0: 0, y0: 0, x1: 0, y1: 0 };
}

/** Map a pointer event to image coordinates (canvas is 1:1 with the image). */
export function pointerToImage(
  canvas: HTMLCanvasElement,
  clientX: number,
  clientY: number,
): { x: number; y: number } {
  const rect = canvas.getBoundingClientRect();
  const sx = canvas.width / rect.width;
  const sy = canvas.height / rect.height;
  return { x: (clientX - rect.left) * sx, y: (clientY - rect.top) * sy };
}

export function renderOverlay(
  ctx: CanvasRenderingContext2D,
  image: HTMLImageElement | null,
  session: SessionState,
  drag: DragState,
  issueDraftIds: Set<number>,
): void {
  const { width, height } = ctx.canvas;
  ctx.clearRect(0, 0, width, height);
  if (image) {
    ctx.drawImage(image, 0, 0, width, height);
  }
  for (const draft of session.drafts) {
    drawBox(ctx, draft, issueDraftIds.has(draft.id));
  }
  if (drag.active) {
    const box = normalizeDrag(session, drag.x0, drag.y0, drag.x1, drag.y1);
    ctx.save();
    ctx.strokeStyle = "#58a6ff";
    ctx.setLineDash([4, 3]);
    ctx.strokeRect(box.x + 0.5, box.y + 0.5, box.w, box.h);
    ctx.restore();
  }
}

function drawBox(ctx: CanvasRenderingContext2D, draft: LineDraft, hasIssue: boolean): void {
  ctx.save();
  ctx.strokeStyle = hasIssue ? "#f85149" : "#3fb950";
  ctx.lineWidth = 1;
  const b: Box = draft.box;
  ctx.strokeRect(b.x + 0.5, b.y + 0.5, b.w, b.h);
  ctx.fillStyle = hasIssue ? "rgba(248,81,73,0.75)" : "rgba(63,185,80,0.75)";
  const label = `#${draft.id} ${draft.text || "(empty)"}`;
  ctx.font = "10px monospace";
  const tw = ctx.measureText(label).width + 4;
  ctx.fillRect(b.x, Math.max(0, b.y - 11), tw, 11);
  ctx.fillStyle = "#fff";
  ctx.fillText(label, b.x + 2, Math.max(9, b.y - 2));
  ctx.restore();
}
