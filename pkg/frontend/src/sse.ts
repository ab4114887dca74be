// Event-stream client: incremental parser plus a fetch-based reader with
// automatic reconnect. The store keeps the last good frame, so a reconnect
// resumes the view from where it stopped instead of blanking it.

export class SseParser {
  private buf = "";
  private dataLines: string[] = [];

  /** Feed a chunk; returns the data payloads of any completed events. */
  push(chunk: string): string[] {
    const out: string[] = [];
    this.buf += chunk;
    let idx: number;
    while ((idx = this.buf.indexOf("\n")) >= 0) {
      let line = this.buf.slice(0, idx);
      this.buf = this.buf.slice(idx + 1);
      if (line.endsWith("\r")) line = line.slice(0, -1);
      if (line === "") {
        if (this.dataLines.length > 0) {
          out.push(this.dataLines.join("\n"));
          this.dataLines = [];
        }
      } else if (line.startsWith("data:")) {
        this.dataLines.push(line.slice(5).replace(/^ /, ""));
      }
      // other fields (id, event, retry) and comments are irrelevant here
    }
    return out;
  }
}

export interface StreamHandle {
  close(): void;
}

export function connectStream(
  url: string,
  onData: (payload: string) => void,
  onStatus: (connected: boolean) => void,
  retryMs = 1000,
): StreamHandle {
  let closed = false;
  let controller: AbortController | null = null;
  let timer: ReturnType<typeof setTimeout> | null = null;

  const attempt = async () => {
    controller = new AbortController();
    const parser = new SseParser();
    try {
      const resp = await fetch(url, {
        signal: controller.signal,
        headers: { Accept: "text/event-stream" },
      });
      if (!resp.ok || !resp.body) throw new Error(`stream http ${resp.status}`);
      onStatus(true);
      const reader = resp.body.getReader();
      const decoder = new TextDecoder();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        for (const payload of parser.push(decoder.decode(value, { stream: true }))) {
          onData(payload);
        }
      }
    } catch {
      // fall through to the retry path; abort lands here too
    }
    if (closed) return;
    onStatus(false);
    timer = setTimeout(attempt, retryMs);
  };

  void attempt();
  return {
    close() {
      closed = true;
      if (timer !== null) clearTimeout(timer);
      controller?.abort();
    },
  };
}
