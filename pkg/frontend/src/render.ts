/** HTML for the chat view, as plain strings.
 *
 * Rendering never touches the DOM, so the whole presentation layer is
 * testable under node. main.ts assigns the output to innerHTML and wires
 * events by id / data-action.
 */

import { MODES, type ChatViewState, type Turn } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

export function latencyBadge(seconds: number): string {
  return `<span class="latency">${seconds.toFixed(3)}s</span>`;
}

function assistantHtml(turn: Turn & { speaker: "assistant" }): string {
  const parts = [`<p class="answer">${escapeHtml(turn.text)}</p>`];
  if (turn.promptUsed === "casual") {
    // Casual replies never consulted the document; say so instead of
    // showing an empty provenance list.
    parts.push('<span class="no-reference">no reference used</span>');
  } else {
    const items = turn.selectedHeadings
      .map((heading) => `<li>${escapeHtml(heading)}</li>`)
      .join("");
    parts.push(`<ul class="provenance">${items}</ul>`);
  }
  parts.push(latencyBadge(turn.latencySeconds));
  parts.push(`<span class="mode-label">${escapeHtml(turn.mode)}</span>`);
  return `<li class="turn assistant">${parts.join("")}</li>`;
}

function userHtml(turn: Turn & { speaker: "user" }): string {
  const text = `<p>${escapeHtml(turn.text)}</p>`;
  if (turn.unsent) {
    const retry = '<button class="retry" data-action="retry">retry</button>';
    return `<li class="turn user unsent">${text}${retry}</li>`;
  }
  return `<li class="turn user">${text}</li>`;
}

export function renderTurns(turns: Turn[]): string {
  const items = turns
    .map((turn) => (turn.speaker === "user" ? userHtml(turn) : assistantHtml(turn)))
    .join("");
  return `<ol class="turns">${items}</ol>`;
}

function modePicker(current: string): string {
  const options = MODES.map((mode) => {
    const selected = mode === current ? " selected" : "";
    return `<option value="${mode}"${selected}>${mode}</option>`;
  }).join("");
  return `<select id="mode">${options}</select>`;
}

function tocPanel(state: ChatViewState): string {
  if (state.toc === null) {
    return "";
  }
  const title = escapeHtml(state.toc.title);
  const body = escapeHtml(state.toc.toc);
  return `<details class="toc"><summary>${title}</summary><pre>${body}</pre></details>`;
}

export function renderApp(state: ChatViewState): string {
  const session =
    state.sessionId === null
      ? '<span class="session">new session</span>'
      : `<span class="session">session ${escapeHtml(state.sessionId)}</span>`;
  const notice = state.notice === null ? "" : `<p class="notice">${escapeHtml(state.notice)}</p>`;
  const disabled = state.pending ? " disabled" : "";
  const composer =
    '<form id="composer">' +
    `<input id="message" type="text" autocomplete="off"${disabled}>` +
    `<button id="send" type="submit"${disabled}>Send</button>` +
    "</form>";
  return (
    '<header class="bar">' +
    modePicker(state.mode) +
    session +
    "</header>" +
    tocPanel(state) +
    notice +
    renderTurns(state.turns) +
    composer
  );
}
