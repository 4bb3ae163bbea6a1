/** In-process stand-in for the chat service's HTTP surface.
 *
 * Mirrors the endpoint shapes the real backend serves (POST /chat,
 * GET /sessions/{id}, GET /corpus/toc) and records every /chat request
 * body so tests can assert on what the client actually sent.
 */

import { createServer, type IncomingMessage, type Server, type ServerResponse } from "node:http";
import type { AddressInfo } from "node:net";

export interface RecordedChat {
  message: string;
  mode: string;
  session_id?: string;
}

interface LogLine {
  speaker: "user" | "assistant";
  text: string;
  provenance?: string[];
  prompt_used?: string;
  mode?: string;
  latency_seconds?: number;
}

export interface Fixture {
  url: string;
  requests: RecordedChat[];
  close(): Promise<void>;
}

function readBody(req: IncomingMessage): Promise<string> {
  return new Promise((resolve, reject) => {
    const chunks: Buffer[] = [];
    req.on("data", (chunk: Buffer) => chunks.push(chunk));
    req.on("end", () => resolve(Buffer.concat(chunks).toString("utf8")));
    req.on("error", reject);
  });
}

function json(res: ServerResponse, status: number, payload: unknown): void {
  res.writeHead(status, { "content-type": "application/json" });
  res.end(JSON.stringify(payload));
}

function replyFor(message: string, mode: string): {
  answer: string;
  selected_headings: string[];
  prompt_used: string;
  latency_seconds: number;
} {
  if (/\b(hello|hi)\b/i.test(message)) {
    return {
      answer: "Hello there!",
      selected_headings: [],
      prompt_used: "casual",
      latency_seconds: 0.002,
    };
  }
  if (mode === "c50_v300" || mode === "c100_v150") {
    return {
      answer: `The chunks say: ${message}`,
      selected_headings: ["chunk:0", "chunk:3"],
      prompt_used: "with_reference",
      latency_seconds: 0.041,
    };
  }
  return {
    answer: `The book says: ${message}`,
    selected_headings: ["H2", "H5"],
    prompt_used: "with_reference",
    latency_seconds: 0.123,
  };
}

export async function startFixture(): Promise<Fixture> {
  const requests: RecordedChat[] = [];
  const sessions = new Map<string, LogLine[]>();
  let counter = 0;

  const server: Server = createServer((req, res) => {
    void (async () => {
      const url = new URL(req.url ?? "/", "http://fixture");
      if (req.method === "POST" && url.pathname === "/chat") {
        const body = JSON.parse(await readBody(req)) as RecordedChat;
        requests.push(body);
        const sessionId = body.session_id ?? `s-${++counter}`;
        const log = sessions.get(sessionId) ?? [];
        sessions.set(sessionId, log);
        const reply = replyFor(body.message, body.mode);
        log.push({ speaker: "user", text: body.message });
        log.push({
          speaker: "assistant",
          text: reply.answer,
          provenance: reply.selected_headings,
          prompt_used: reply.prompt_used,
          mode: body.mode,
          latency_seconds: reply.latency_seconds,
        });
        json(res, 200, { session_id: sessionId, ...reply });
        return;
      }
      if (req.method === "GET" && url.pathname.startsWith("/sessions/")) {
        const id = decodeURIComponent(url.pathname.slice("/sessions/".length));
        const log = sessions.get(id);
        if (log === undefined) {
          json(res, 404, { detail: "unknown session" });
        } else {
          json(res, 200, { session_id: id, turns: log });
        }
        return;
      }
      if (req.method === "GET" && url.pathname === "/corpus/toc") {
        json(res, 200, {
          doc_id: "guide",
          title: "User Guide",
          toc: "User Guide\n  Installation\n  Usage",
        });
        return;
      }
      json(res, 404, { detail: "not found" });
    })().catch(() => {
      res.writeHead(500);
      res.end();
    });
  });

  await new Promise<void>((resolve) => server.listen(0, "127.0.0.1", resolve));
  const address = server.address() as AddressInfo;
  return {
    url: `http://127.0.0.1:${address.port}`,
    requests,
    close: () =>
      new Promise<void>((resolve, reject) =>
        server.close((err) => (err ? reject(err) : resolve())),
      ),
  };
}
