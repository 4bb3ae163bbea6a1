/** View-state transitions.
 *
 * The pure functions here are the only way the state changes, and none of
 * them invent retrieval results: every answer, heading list, and latency
 * comes verbatim from a server payload. The async helpers just sequence a
 * transition around one HTTP call.
 */

import { ApiError, type ApiClient } from "./api.js";
import {
  MODES,
  type AssistantTurn,
  type ChatReply,
  type ChatViewState,
  type LoggedTurn,
  type Mode,
  type Turn,
} from "./types.js";

export function initialState(mode: Mode = "prompt_rag"): ChatViewState {
  return {
    sessionId: null,
    mode,
    turns: [],
    pending: false,
    notice: null,
    toc: null,
  };
}

/** Append the optimistic user turn and close the composer. */
export function beginSend(state: ChatViewState, text: string): ChatViewState {
  if (state.pending) {
    throw new Error("a message is already in flight");
  }
  if (text.trim() === "") {
    throw new Error("cannot send an empty message");
  }
  return {
    ...state,
    pending: true,
    notice: null,
    turns: [...state.turns, { speaker: "user", text, unsent: false }],
  };
}

/** Record the assistant turn exactly as the server described it. */
export function completeSend(state: ChatViewState, reply: ChatReply): ChatViewState {
  const assistant: AssistantTurn = {
    speaker: "assistant",
    text: reply.answer,
    selectedHeadings: [...reply.selected_headings],
    latencySeconds: reply.latency_seconds,
    promptUsed: reply.prompt_used,
    mode: state.mode,
  };
  return {
    ...state,
    sessionId: reply.session_id,
    pending: false,
    turns: [...state.turns, assistant],
  };
}

/** Mark the optimistic turn unsent so it renders as a retryable bubble. */
export function failSend(state: ChatViewState, reason: string): ChatViewState {
  const turns = [...state.turns];
  for (let i = turns.length - 1; i >= 0; i--) {
    const turn = turns[i];
    if (turn !== undefined && turn.speaker === "user") {
      turns[i] = { ...turn, unsent: true };
      break;
    }
  }
  return { ...state, pending: false, turns, notice: reason };
}

function describe(error: unknown): string {
  return error instanceof Error ? error.message : String(error);
}

/**
 * Full round trip: optimistic turn, POST /chat, then the assistant turn or
 * the unsent marker. A submission while one is pending is dropped, not
 * queued; the returned state is unchanged and no request goes out.
 */
export async function submitMessage(
  api: ApiClient,
  state: ChatViewState,
  text: string,
): Promise<ChatViewState> {
  if (state.pending || text.trim() === "") {
    return state;
  }
  const sending = beginSend(state, text);
  try {
    const reply = await api.chat(text, state.sessionId, state.mode);
    return completeSend(sending, reply);
  } catch (error) {
    return failSend(sending, describe(error));
  }
}

/** Pop the most recent unsent turn so its text can be submitted again. */
export function takeUnsent(state: ChatViewState): { state: ChatViewState; text: string } | null {
  for (let i = state.turns.length - 1; i >= 0; i--) {
    const turn = state.turns[i];
    if (turn !== undefined && turn.speaker === "user" && turn.unsent) {
      const turns = [...state.turns.slice(0, i), ...state.turns.slice(i + 1)];
      return { state: { ...state, turns, notice: null }, text: turn.text };
    }
  }
  return null;
}

/** Later messages carry the new mode; earlier turns keep their labels. */
export function switchMode(state: ChatViewState, mode: string): ChatViewState {
  if (!(MODES as readonly string[]).includes(mode)) {
    throw new Error(`unknown mode: ${mode}`);
  }
  return { ...state, mode: mode as Mode };
}

export function turnsFromHistory(logged: LoggedTurn[]): Turn[] {
  return logged.map((entry): Turn => {
    if (entry.speaker === "user") {
      return { speaker: "user", text: entry.text, unsent: false };
    }
    return {
      speaker: "assistant",
      text: entry.text,
      selectedHeadings: entry.provenance ?? [],
      latencySeconds: entry.latency_seconds ?? 0,
      promptUsed: entry.prompt_used ?? "casual",
      mode: entry.mode ?? "prompt_rag",
    };
  });
}

/**
 * Replay a stored session into a fresh view. An unknown or malformed id
 * falls back to an empty new session with a notice; anything else (the
 * server being unreachable, say) propagates to the caller.
 */
export async function loadSession(
  api: ApiClient,
  sessionId: string,
  fallbackMode: Mode = "prompt_rag",
): Promise<ChatViewState> {
  try {
    const history = await api.session(sessionId);
    const turns = turnsFromHistory(history.turns);
    return {
      ...initialState(resumedMode(turns, fallbackMode)),
      sessionId: history.session_id,
      turns,
    };
  } catch (error) {
    if (error instanceof ApiError && (error.status === 404 || error.status === 422)) {
      return {
        ...initialState(fallbackMode),
        notice: `session ${sessionId} not found, starting a new one`,
      };
    }
    throw error;
  }
}

function resumedMode(turns: Turn[], fallback: Mode): Mode {
  for (let i = turns.length - 1; i >= 0; i--) {
    const turn = turns[i];
    if (turn !== undefined && turn.speaker === "assistant") {
      if ((MODES as readonly string[]).includes(turn.mode)) {
        return turn.mode as Mode;
      }
      break;
    }
  }
  return fallback;
}
