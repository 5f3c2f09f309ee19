/**
 * Envelope client for the coordinator HTTP gateway (POST /rpc).
 *
 * Every call sends exactly one message envelope and returns the correlated
 * response envelope; typed rejections surface as RpcRejection.
 */

export interface Envelope {
  msg_type: string;
  msg_id: string;
  payload: Record<string, unknown>;
}

export class RpcRejection extends Error {
  constructor(
    public readonly reasonCode: string,
    public readonly detail: string,
    public readonly data: Record<string, unknown>,
  ) {
    super(`${reasonCode}: ${detail}`);
  }
}

export class GatewayUnreachable extends Error {}

let counter = 0;

export function newMsgId(): string {
  counter += 1;
  return `console-${Date.now().toString(16)}-${counter}`;
}

export async function rpcCall(
  gateway: string,
  msgType: string,
  payload: Record<string, unknown>,
  fetchImpl: typeof fetch = fetch,
): Promise<Envelope> {
  const envelope: Envelope = { msg_type: msgType, msg_id: newMsgId(), payload };
  let response: Response;
  try {
    response = await fetchImpl(`${gateway.replace(/\/$/, "")}/rpc`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(envelope),
    });
  } catch (err) {
    throw new GatewayUnreachable(`${gateway}: ${err}`);
  }
  if (!response.ok) {
    throw new GatewayUnreachable(`${gateway}: HTTP ${response.status}`);
  }
  const body = (await response.json()) as Envelope;
  if (body.msg_type === "error.rejected") {
    const p = body.payload as {
      reason_code: string;
      detail: string;
      data?: Record<string, unknown>;
    };
    throw new RpcRejection(p.reason_code, p.detail, p.data ?? {});
  }
  return body;
}
