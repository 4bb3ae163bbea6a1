/** Browser entry point: wires state + render to the DOM and localStorage.
 *
 * Everything here is glue; the behaviour lives in state.ts / render.ts and
 * is covered by the node test suite. This module only runs in a browser.
 */

import { createApi } from "./api.js";
import { renderApp } from "./render.js";
import {
  beginSend,
  completeSend,
  failSend,
  initialState,
  loadSession,
  submitMessage,
  switchMode,
  takeUnsent,
} from "./state.js";
import type { ChatViewState, Mode } from "./types.js";

const SESSION_KEY = "tocrag.session";
const MODE_KEY = "tocrag.mode";

const api = createApi("");
const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app element");
}
const app = root;

let state: ChatViewState = initialState(storedMode());

function storedMode(): Mode {
  const saved = localStorage.getItem(MODE_KEY);
  return saved === "prompt_rag" ||
    saved === "c50_v300" ||
    saved === "c100_v150" ||
    saved === "no_retrieval"
    ? saved
    : "prompt_rag";
}

function persist(): void {
  if (state.sessionId === null) {
    localStorage.removeItem(SESSION_KEY);
  } else {
    localStorage.setItem(SESSION_KEY, state.sessionId);
  }
  localStorage.setItem(MODE_KEY, state.mode);
}

function paint(): void {
  app.innerHTML = renderApp(state);
  const composer = document.getElementById("composer");
  composer?.addEventListener("submit", (event) => {
    event.preventDefault();
    const input = document.getElementById("message") as HTMLInputElement | null;
    if (input !== null) {
      void send(input.value);
    }
  });
  const picker = document.getElementById("mode") as HTMLSelectElement | null;
  picker?.addEventListener("change", () => {
    if (picker !== null) {
      state = switchMode(state, picker.value);
      persist();
      paint();
    }
  });
  for (const button of app.querySelectorAll('button[data-action="retry"]')) {
    button.addEventListener("click", () => {
      void retry();
    });
  }
}

async function send(text: string): Promise<void> {
  if (state.pending || text.trim() === "") {
    return;
  }
  // Paint the user's bubble before the request so the send feels instant.
  state = beginSend(state, text);
  paint();
  try {
    const reply = await api.chat(text, state.sessionId, state.mode);
    state = completeSend(state, reply);
  } catch (error) {
    state = failSend(state, error instanceof Error ? error.message : String(error));
  }
  persist();
  paint();
}

async function retry(): Promise<void> {
  const popped = takeUnsent(state);
  if (popped === null) {
    return;
  }
  state = popped.state;
  paint();
  state = await submitMessage(api, state, popped.text);
  persist();
  paint();
}

async function boot(): Promise<void> {
  const savedSession = localStorage.getItem(SESSION_KEY);
  if (savedSession !== null) {
    try {
      state = await loadSession(api, savedSession, state.mode);
    } catch {
      state = { ...state, notice: "could not reach the server to restore the session" };
    }
  }
  try {
    state = { ...state, toc: await api.toc() };
  } catch {
    // No corpus ingested yet; the panel just stays hidden.
  }
  persist();
  paint();
}

void boot();
