/**
 * Pure editing-session logic: line drafts, geometry validation, history.
 *
 * Everything here is DOM-free so the behaviors the server will enforce
 * (bounds, non-empty text, overlaps) can be unit-tested and reported inline
 * before a request is ever sent.
 */

import type { Box, EditRequestPayload, JobRecord, LinePayload } from "./types.js";

export interface LineDraft {
  id: number;
  box: Box;
  text: string;
  color: string | null;
}

export interface HistoryEntry {
  request: EditRequestPayload;
  jobId: string;
  record: JobRecord | null;
}

export interface SessionState {
  imageBase64: string | null;
  imageWidth: number;
  imageHeight: number;
  drafts: LineDraft[];
  checkpoint: string | null;
  seed: number;
  steps: number | null;
  color: string | null;
  history: HistoryEntry[];
  nextDraftId: number;
}

export function newSession(): SessionState {
  return {
    imageBase64: null,
    imageWidth: 0,
    imageHeight: 0,
    drafts: [],
    checkpoint: null,
    seed: 0,
    steps: null,
    color: null,
    history: [],
    nextDraftId: 1,
  };
}

export function loadImage(
  session: SessionState,
  base64: string,
  width: number,
  height: number,
): SessionState {
  return {
    ...session,
    imageBase64: base64,
    imageWidth: width,
    imageHeight: height,
    drafts: [],
  };
}

/** Snap a drag rectangle to integer pixels, clamped inside the image. */
export function normalizeDrag(
  session: SessionState,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
): Box {
  const clampX = (v: number) => Math.min(Math.max(Math.round(v), 0), session.imageWidth);
  const clampY = (v: number) => Math.min(Math.max(Math.round(v), 0), session.imageHeight);
  const ax = clampX(Math.min(x0, x1));
  const ay = clampY(Math.min(y0, y1));
  const bx = clampX(Math.max(x0, x1));
  const by = clampY(Math.max(y0, y1));
  return { x: ax, y: ay, w: bx - ax, h: by - ay };
}

/** Add a draft from a drag gesture; zero-area boxes are rejected. */
export function addDraft(session: SessionState, box: Box): SessionState | null {
  if (box.w < 1 || box.h < 1) {
    return null;
  }
  const draft: LineDraft = { id: session.nextDraftId, box, text: "", color: null };
  return {
    ...session,
    drafts: [...session.drafts, draft],
    nextDraftId: session.nextDraftId + 1,
  };
}

export function updateDraftText(session: SessionState, id: number, text: string): SessionState {
  return {
    ...session,
    drafts: session.drafts.map((d) => (d.id === id ? { ...d, text } : d)),
  };
}

export function removeDraft(session: SessionState, id: number): SessionState {
  return { ...session, drafts: session.drafts.filter((d) => d.id !== id) };
}

export function boxesOverlap(a: Box, b: Box): boolean {
  return !(
    a.x + a.w <= b.x ||
    b.x + b.w <= a.x ||
    a.y + a.h <= b.y ||
    b.y + b.h <= a.y
  );
}

export interface DraftIssue {
  draftId: number;
  kind: "empty-text" | "out-of-bounds" | "overlap";
  message: string;
}

/** Client-side mirror of the server's validation rules. */
export function validateSession(session: SessionState): DraftIssue[] {
  const issues: DraftIssue[] = [];
  for (const d of session.drafts) {
    if (!d.text) {
      issues.push({ draftId: d.id, kind: "empty-text", message: "text is empty" });
    }
    const inBounds =
      d.box.x >= 0 &&
      d.box.y >= 0 &&
      d.box.w > 0 &&
      d.box.h > 0 &&
      d.box.x + d.box.w <= session.imageWidth &&
      d.box.y + d.box.h <= session.imageHeight;
    if (!inBounds) {
      issues.push({ draftId: d.id, kind: "out-of-bounds", message: "box outside image" });
    }
  }
  for (let i = 0; i < session.drafts.length; i++) {
    for (let j = i + 1; j < session.drafts.length; j++) {
      if (boxesOverlap(session.drafts[i].box, session.drafts[j].box)) {
        issues.push({
          draftId: session.drafts[j].id,
          kind: "overlap",
          message: `overlaps draft #${session.drafts[i].id}`,
        });
      }
    }
  }
  return issues;
}

export function canSubmit(session: SessionState): boolean {
  return (
    session.imageBase64 !== null &&
    session.checkpoint !== null &&
    session.drafts.length > 0 &&
    validateSession(session).length === 0
  );
}

/** Build the POST /api/edit payload for the current session. */
export function buildEditPayload(session: SessionState): EditRequestPayload {
  if (!session.imageBase64 || !session.checkpoint) {
    throw new Error("session is not ready to submit");
  }
  const lines: LinePayload[] = session.drafts.map((d) => ({
    box: [d.box.x, d.box.y, d.box.w, d.box.h],
    text: d.text,
  }));
  const payload: EditRequestPayload = {
    image: session.imageBase64,
    lines,
    checkpoint: session.checkpoint,
    seed: session.seed,
  };
  if (session.steps !== null) payload.steps = session.steps;
  if (session.color !== null) payload.color = session.color;
  return payload;
}

export function pushHistory(
  session: SessionState,
  request: EditRequestPayload,
  jobId: string,
): SessionState {
  return {
    ...session,
    history: [...session.history, { request, jobId, record: null }],
  };
}

export function resolveHistory(
  session: SessionState,
  jobId: string,
  record: JobRecord,
): SessionState {
  return {
    ...session,
    history: session.history.map((h) => (h.jobId === jobId ? { ...h, record } : h)),
  };
}

/** "Use result as new source": keeps iterating on the edited image. */
export function adoptResult(
  session: SessionState,
  base64: string,
  width: number,
  height: number,
): SessionState {
  return loadImage(session, base64, width, height);
}
