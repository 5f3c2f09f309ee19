/**
 * Operator actions. Each maps 1:1 onto a single documented wire message;
 * there are no hidden multi-step mutations behind a button.
 */

import { PendingAction } from "./model.js";
import { Envelope, GatewayUnreachable, RpcRejection, rpcCall } from "./rpc.js";

export class ActionLog {
  readonly entries: PendingAction[] = [];
  private next = 1;

  constructor(private readonly onChange: () => void = () => {}) {}

  private track(kind: PendingAction["kind"], summary: string): PendingAction {
    const action: PendingAction = {
      id: this.next++,
      kind,
      summary,
      status: "pending",
      detail: "",
    };
    this.entries.unshift(action);
    this.onChange();
    return action;
  }

  private async run(
    action: PendingAction,
    call: () => Promise<Envelope>,
  ): Promise<Envelope | null> {
    try {
      const response = await call();
      action.status = "ok";
      action.detail = JSON.stringify(response.payload);
      return response;
    } catch (err) {
      if (err instanceof RpcRejection) {
        action.status = "rejected";
        action.detail = `${err.reasonCode}: ${err.detail}`;
      } else if (err instanceof GatewayUnreachable) {
        action.status = "unreachable";
        action.detail = err.message;
      } else {
        action.status = "unreachable";
        action.detail = String(err);
      }
      return null;
    } finally {
      this.onChange();
    }
  }

  transfer(
    gateway: string,
    primary: string,
    dest: string,
    fetchImpl: typeof fetch = fetch,
  ): Promise<Envelope | null> {
    const action = this.track("transfer", `transfer ${primary} -> ${dest}`);
    return this.run(action, () =>
      rpcCall(gateway, "cell.transfer", { primary, dest }, fetchImpl),
    );
  }

  submit(
    gateway: string,
    pipeline: { tasks: unknown[] },
    fetchImpl: typeof fetch = fetch,
  ): Promise<Envelope | null> {
    const action = this.track("submit", `submit ${pipeline.tasks.length} task(s)`);
    return this.run(action, () =>
      rpcCall(gateway, "task.submit", { pipeline }, fetchImpl),
    );
  }

  terminate(
    gateway: string,
    taskId: string,
    fetchImpl: typeof fetch = fetch,
  ): Promise<Envelope | null> {
    const action = this.track("terminate", `terminate ${taskId}`);
    return this.run(action, () =>
      rpcCall(gateway, "task.terminate", { task_id: taskId }, fetchImpl),
    );
  }
}
