/**
 * View model derived purely from cell.query responses. No client-side
 * invented state: everything rendered traces back to a coordinator answer.
 */

export interface Resources {
  cpu: number;
  mem: number;
  disk: number;
  gmem: number;
}

export interface NodeRecord {
  id: string;
  role: "primary" | "coordinator";
  arch: string;
  control_endpoint: string;
  registry_switch_endpoint: string;
  capacity: Resources;
  usage: Resources;
  gpu: {
    gpus: { gpu_id: string; mem_capacity: number; mem_used: number }[];
    unified_memory: boolean;
  };
  cell: string | null;
}

export interface MemberEntry {
  record: NodeRecord;
  active: boolean;
  last_seen: number;
}

export interface InstanceRecord {
  task_id: string;
  instance_id: string;
  image_id: string;
  node: string;
  params: Record<string, string>;
  status: "building" | "running" | "stopped" | "failed";
}

export interface CellSnapshot {
  coordinator: string;
  members: MemberEntry[];
  deployments: Record<string, InstanceRecord[]>;
}

export interface Gauge {
  used: number;
  capacity: number;
  ratio: number;
}

export interface MemberView {
  id: string;
  role: string;
  arch: string;
  active: boolean;
  cpu: Gauge;
  mem: Gauge;
  instances: InstanceRecord[];
}

export interface CellView {
  gateway: string;
  coordinator: string;
  stale: boolean;
  members: MemberView[];
  instanceCount: number;
}

export type ActionStatus = "pending" | "ok" | "rejected" | "unreachable";

export interface PendingAction {
  id: number;
  kind: "transfer" | "submit" | "terminate";
  summary: string;
  status: ActionStatus;
  detail: string;
}

export interface ConsoleViewModel {
  cells: CellView[];
  actions: PendingAction[];
}

function gauge(used: number, capacity: number): Gauge {
  return { used, capacity, ratio: capacity > 0 ? used / capacity : 0 };
}

export function cellView(
  gateway: string,
  snapshot: CellSnapshot,
  stale: boolean,
): CellView {
  const members = snapshot.members.map((m) => ({
    id: m.record.id,
    role: m.record.role,
    arch: m.record.arch,
    active: m.active,
    cpu: gauge(m.record.usage.cpu, m.record.capacity.cpu),
    mem: gauge(m.record.usage.mem, m.record.capacity.mem),
    instances: snapshot.deployments[m.record.id] ?? [],
  }));
  const instanceCount = Object.values(snapshot.deployments).reduce(
    (n, records) => n + records.length,
    0,
  );
  return { gateway, coordinator: snapshot.coordinator, stale, members, instanceCount };
}

/**
 * Canonical JSON identical byte-for-byte to the Python side's canonical
 * form (sorted keys, compact separators): used to compare registries.
 */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  const record = value as Record<string, unknown>;
  const keys = Object.keys(record).sort();
  const parts = keys.map((k) => JSON.stringify(k) + ":" + canonicalJson(record[k]));
  return "{" + parts.join(",") + "}";
}

/**
 * The registry-equality subset: liveness metadata (active, last_seen) is
 * volatile observability state and excluded, matching the coordinator's
 * own canonical form.
 */
export function canonicalRegistry(snapshot: CellSnapshot): string {
  const members: Record<string, NodeRecord> = {};
  for (const m of snapshot.members) {
    members[m.record.id] = m.record;
  }
  const deployments: Record<string, InstanceRecord[]> = {};
  for (const [node, records] of Object.entries(snapshot.deployments)) {
    if (records.length > 0) {
      deployments[node] = [...records].sort((a, b) =>
        a.instance_id < b.instance_id ? -1 : a.instance_id > b.instance_id ? 1 : 0,
      );
    }
  }
  return canonicalJson({
    coordinator: snapshot.coordinator,
    members,
    deployments,
  });
}
