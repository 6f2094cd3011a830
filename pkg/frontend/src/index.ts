export {
  BATCH_EXHAUSTED,
  BATCH_NOT_READY,
  BATCH_OK,
  decodeFrame,
  encodeFrame,
  FrameDecoder,
  MAX_FRAME,
  POLICY_FIFO,
  POLICY_TOKEN_BALANCED,
  ProtocolError,
  Reader,
  Writer,
} from "./wire.js";
export type { Message } from "./wire.js";
export { Connection, parseEndpoint, ServerError } from "./connection.js";
export { connect, Session } from "./client.js";
export type { Batch, ClientConfig } from "./client.js";
