/** Wire payloads of the chat service and the view model built from them. */

export const MODES = [
  "prompt_rag",
  "c50_v300",
  "c100_v150",
  "no_retrieval",
] as const;

export type Mode = (typeof MODES)[number];

/** POST /chat response body. */
export interface ChatReply {
  session_id: string;
  answer: string;
  selected_headings: string[];
  prompt_used: string;
  latency_seconds: number;
}

/** One line of a stored session, as GET /sessions/{id} returns it. */
export interface LoggedTurn {
  speaker: "user" | "assistant";
  text: string;
  provenance?: string[];
  prompt_used?: string;
  mode?: string;
  latency_seconds?: number;
}

export interface SessionHistory {
  session_id: string;
  turns: LoggedTurn[];
}

/** GET /corpus/toc response body. */
export interface TocInfo {
  doc_id: string;
  title: string;
  toc: string;
}

export interface UserTurn {
  speaker: "user";
  text: string;
  /** Set when the POST failed; the bubble renders with a retry button. */
  unsent: boolean;
}

/** Everything shown for one answer is verbatim from a server payload. */
export interface AssistantTurn {
  speaker: "assistant";
  text: string;
  selectedHeadings: string[];
  latencySeconds: number;
  promptUsed: string;
  /** The retrieval mode the turn was asked under; never relabeled later. */
  mode: string;
}

export type Turn = UserTurn | AssistantTurn;

/**
 * The whole page as data. After every completed round trip the turns mirror
 * the server's session log; `pending` gates the composer so one request per
 * session is in flight at a time.
 */
export interface ChatViewState {
  sessionId: string | null;
  mode: Mode;
  turns: Turn[];
  pending: boolean;
  notice: string | null;
  toc: TocInfo | null;
}
