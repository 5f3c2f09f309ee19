/**
 * Periodic cell.query aggregation across the configured gateways.
 * A gateway that stops answering keeps its last snapshot, marked stale.
 */

import { CellSnapshot, CellView, cellView } from "./model.js";
import { rpcCall } from "./rpc.js";

export const DEFAULT_POLL_MS = 2000;

export class Poller {
  private last = new Map<string, CellSnapshot>();
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly gateways: string[],
    private readonly onUpdate: (cells: CellView[]) => void,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  async pollOnce(): Promise<CellView[]> {
    const cells: CellView[] = [];
    for (const gateway of this.gateways) {
      try {
        const response = await rpcCall(gateway, "cell.query", {}, this.fetchImpl);
        const snapshot = response.payload as unknown as CellSnapshot;
        this.last.set(gateway, snapshot);
        cells.push(cellView(gateway, snapshot, false));
      } catch {
        const snapshot = this.last.get(gateway);
        if (snapshot !== undefined) {
          cells.push(cellView(gateway, snapshot, true));
        }
      }
    }
    this.onUpdate(cells);
    return cells;
  }

  start(intervalMs: number = DEFAULT_POLL_MS): void {
    void this.pollOnce();
    this.timer = setInterval(() => void this.pollOnce(), intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
