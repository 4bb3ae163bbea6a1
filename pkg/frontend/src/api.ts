/** Thin fetch wrapper over the chat service endpoints. */

import type { ChatReply, SessionHistory, TocInfo } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface ApiClient {
  chat(message: string, sessionId: string | null, mode: string): Promise<ChatReply>;
  session(sessionId: string): Promise<SessionHistory>;
  toc(): Promise<TocInfo>;
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const payload = (await response.json()) as { detail?: unknown };
    if (typeof payload.detail === "string") {
      return payload.detail;
    }
  } catch {
    // non-JSON error body, fall through to the generic message
  }
  return `request failed with status ${response.status}`;
}

export function createApi(baseUrl: string, fetchFn: typeof fetch = fetch): ApiClient {
  const root = baseUrl.replace(/\/+$/, "");

  async function request(path: string, init?: RequestInit): Promise<unknown> {
    const response = await fetchFn(root + path, init);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return response.json();
  }

  return {
    async chat(message, sessionId, mode) {
      const body: Record<string, unknown> = { message, mode };
      if (sessionId !== null) {
        body.session_id = sessionId;
      }
      return (await request("/chat", {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      })) as ChatReply;
    },

    async session(sessionId) {
      const path = `/sessions/${encodeURIComponent(sessionId)}`;
      return (await request(path)) as SessionHistory;
    },

    async toc() {
      return (await request("/corpus/toc")) as TocInfo;
    },
  };
}
