import { describe, expect, it } from "vitest";

import { ActionLog } from "../src/actions.js";
import { Poller } from "../src/poller.js";
import { GatewayUnreachable, RpcRejection, rpcCall } from "../src/rpc.js";

type Sent = { url: string; body: any };

function fakeFetch(
  respond: (url: string, body: any) => { status?: number; payload?: any; msg_type?: string } | "down",
  sent: Sent[] = [],
): typeof fetch {
  return (async (url: any, init: any) => {
    const body = JSON.parse(init.body);
    sent.push({ url: String(url), body });
    const result = respond(String(url), body);
    if (result === "down") {
      throw new TypeError("fetch failed");
    }
    return {
      ok: (result.status ?? 200) === 200,
      status: result.status ?? 200,
      json: async () => ({
        msg_type: result.msg_type ?? `${body.msg_type}.ok`,
        msg_id: body.msg_id,
        payload: result.payload ?? {},
      }),
    } as Response;
  }) as typeof fetch;
}

describe("rpcCall", () => {
  it("sends one envelope and returns the correlated response", async () => {
    const sent: Sent[] = [];
    const response = await rpcCall(
      "http://gw", "cell.query", {}, fakeFetch(() => ({ payload: { coordinator: "c0" } }), sent));
    expect(sent).toHaveLength(1);
    expect(sent[0].url).toBe("http://gw/rpc");
    expect(sent[0].body.msg_type).toBe("cell.query");
    expect(response.msg_id).toBe(sent[0].body.msg_id);
    expect(response.payload.coordinator).toBe("c0");
  });

  it("raises typed rejections", async () => {
    const fetchImpl = fakeFetch(() => ({
      msg_type: "error.rejected",
      payload: { reason_code: "unknown_task", detail: "nope", data: {} },
    }));
    await expect(rpcCall("http://gw", "task.terminate", { task_id: "x" }, fetchImpl))
      .rejects.toBeInstanceOf(RpcRejection);
  });

  it("maps network failures to GatewayUnreachable", async () => {
    await expect(rpcCall("http://gw", "cell.query", {}, fakeFetch(() => "down")))
      .rejects.toBeInstanceOf(GatewayUnreachable);
  });
});

describe("ActionLog", () => {
  it("each action is exactly one documented wire message", async () => {
    const sent: Sent[] = [];
    const fetchImpl = fakeFetch(() => ({ payload: { ok: true } }), sent);
    const log = new ActionLog();
    await log.transfer("http://gw", "p1", "c2", fetchImpl);
    await log.submit("http://gw", { tasks: [{ task_id: "t1" }] }, fetchImpl);
    await log.terminate("http://gw", "t1", fetchImpl);
    expect(sent.map((s) => s.body.msg_type)).toEqual([
      "cell.transfer", "task.submit", "task.terminate"]);
    expect(sent[0].body.payload).toEqual({ primary: "p1", dest: "c2" });
    expect(sent[2].body.payload).toEqual({ task_id: "t1" });
    expect(log.entries.every((a) => a.status === "ok")).toBe(true);
  });

  it("surfaces rejections non-fatally", async () => {
    const fetchImpl = fakeFetch(() => ({
      msg_type: "error.rejected",
      payload: { reason_code: "unknown_task", detail: "already gone", data: {} },
    }));
    const log = new ActionLog();
    const result = await log.terminate("http://gw", "t9", fetchImpl);
    expect(result).toBeNull();
    expect(log.entries[0].status).toBe("rejected");
    expect(log.entries[0].detail).toContain("unknown_task");
  });
});

describe("Poller", () => {
  const snapshotPayload = {
    coordinator: "c0",
    members: [],
    deployments: {},
  };

  it("keeps the last snapshot and marks it stale when a gateway dies", async () => {
    let alive = true;
    const fetchImpl = fakeFetch(() =>
      alive ? { payload: snapshotPayload } : "down");
    let latest: any[] = [];
    const poller = new Poller(["http://gw"], (cells) => { latest = cells; },
                              fetchImpl);
    await poller.pollOnce();
    expect(latest[0].stale).toBe(false);
    alive = false;
    await poller.pollOnce();
    expect(latest).toHaveLength(1);
    expect(latest[0].stale).toBe(true);
    expect(latest[0].coordinator).toBe("c0");
  });

  it("renders nothing for gateways that never answered", async () => {
    const fetchImpl = fakeFetch(() => "down");
    let latest: any[] = [{ marker: true }];
    const poller = new Poller(["http://gw"], (cells) => { latest = cells; },
                              fetchImpl);
    await poller.pollOnce();
    expect(latest).toEqual([]);
  });
});
