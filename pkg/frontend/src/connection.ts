// One TCP socket speaking the frame protocol; requests and replies
// strictly alternate, so at most one request is ever in flight.

import * as net from "node:net";

import { encodeFrame, FrameDecoder, Message, ProtocolError } from "./wire.js";

export class ServerError extends Error {
  constructor(
    public readonly code: string,
    message: string,
  ) {
    super(`${code}: ${message}`);
    this.name = "ServerError";
  }
}

export function parseEndpoint(endpoint: string): { host: string; port: number } {
  const at = endpoint.lastIndexOf(":");
  if (at <= 0) throw new Error(`endpoint must be host:port, got "${endpoint}"`);
  const host = endpoint.slice(0, at);
  const port = Number(endpoint.slice(at + 1));
  if (!Number.isInteger(port) || port < 1 || port > 65535) {
    throw new Error(`bad port in endpoint ${endpoint}`);
  }
  return { host, port };
}

export class Connection {
  private socket: net.Socket | null = null;
  private decoder = new FrameDecoder();
  private pending: { resolve(m: Message): void; reject(e: Error): void } | null = null;

  constructor(
    private host: string,
    private port: number,
    private timeoutMs = 10_000,
  ) {}

  private async ensure(): Promise<net.Socket> {
    if (this.socket) return this.socket;
    const socket = new net.Socket();
    socket.setNoDelay(true);
    await new Promise<void>((resolve, reject) => {
      const onError = (err: Error) => reject(err);
      socket.once("error", onError);
      socket.connect(this.port, this.host, () => {
        socket.off("error", onError);
        resolve();
      });
    });
    socket.on("data", (chunk: Buffer) => this.onData(chunk));
    socket.on("error", (err: Error) => this.fail(err));
    socket.on("close", () => this.fail(new ProtocolError("connection closed by peer")));
    this.socket = socket;
    this.decoder = new FrameDecoder();
    return socket;
  }

  private onData(chunk: Buffer): void {
    let messages: Message[];
    try {
      messages = this.decoder.feed(new Uint8Array(chunk));
    } catch (err) {
      this.fail(err as Error);
      return;
    }
    for (const message of messages) {
      const waiter = this.pending;
      if (!waiter) continue; // unsolicited frame: drop, alternation broke server-side
      this.pending = null;
      waiter.resolve(message);
    }
  }

  private fail(err: Error): void {
    const waiter = this.pending;
    this.pending = null;
    if (this.socket) {
      this.socket.destroy();
      this.socket = null;
    }
    if (waiter) waiter.reject(err);
  }

  // open the socket without sending anything; fails fast on a dead endpoint
  async dial(): Promise<void> {
    await this.ensure();
  }

  // send one request frame and wait for its reply; an ErrorReply throws
  async call(message: Message): Promise<Message> {
    if (this.pending) throw new Error("a request is already in flight");
    const socket = await this.ensure();
    const reply = await new Promise<Message>((resolve, reject) => {
      this.pending = { resolve, reject };
      const timer = setTimeout(() => {
        this.fail(new ProtocolError(`no reply within ${this.timeoutMs} ms`));
      }, this.timeoutMs);
      const settle = this.pending;
      this.pending = {
        resolve: (m) => {
          clearTimeout(timer);
          settle.resolve(m);
        },
        reject: (e) => {
          clearTimeout(timer);
          settle.reject(e);
        },
      };
      socket.write(encodeFrame(message));
    });
    if (reply.type === "ErrorReply") {
      throw new ServerError(reply.code, reply.message);
    }
    return reply;
  }

  close(): void {
    if (this.socket) {
      this.socket.removeAllListeners("close");
      this.socket.removeAllListeners("error");
      this.socket.destroy();
      this.socket = null;
    }
    this.pending = null;
  }
}
