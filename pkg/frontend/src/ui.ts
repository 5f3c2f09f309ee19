/** DOM rendering: cell panels with member gauges, instances, action log. */

import { CellView, MemberView, PendingAction } from "./model.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function mib(bytes: number): string {
  return `${Math.round(bytes / (1024 * 1024))}Mi`;
}

function gaugeBar(label: string, used: string, ratio: number): HTMLElement {
  const wrap = el("div", "gauge");
  wrap.appendChild(el("span", "gauge-label", label));
  const bar = el("div", "gauge-bar");
  const fill = el("div", "gauge-fill");
  fill.style.width = `${Math.min(100, Math.round(ratio * 100))}%`;
  if (ratio > 0.85) fill.classList.add("hot");
  bar.appendChild(fill);
  wrap.appendChild(bar);
  wrap.appendChild(el("span", "gauge-value", used));
  return wrap;
}

function memberCard(member: MemberView): HTMLElement {
  const card = el("div", member.active ? "member" : "member inactive");
  const head = el("div", "member-head");
  head.appendChild(el("strong", undefined, member.id));
  head.appendChild(el("span", `role ${member.role}`, member.role));
  head.appendChild(el("span", "arch", member.arch));
  if (!member.active) head.appendChild(el("span", "stale-badge", "inactive"));
  card.appendChild(head);
  card.appendChild(gaugeBar("cpu", `${member.cpu.used}m`, member.cpu.ratio));
  card.appendChild(gaugeBar("mem", mib(member.mem.used), member.mem.ratio));
  if (member.instances.length > 0) {
    const list = el("ul", "instances");
    for (const record of member.instances) {
      list.appendChild(
        el("li", `instance ${record.status}`,
           `${record.instance_id} [${record.task_id}] ${record.status}`),
      );
    }
    card.appendChild(list);
  }
  return card;
}

export function renderCells(root: HTMLElement, cells: CellView[]): void {
  root.replaceChildren();
  if (cells.length === 0) {
    root.appendChild(el("p", "empty", "no coordinators reachable yet"));
    return;
  }
  for (const cell of cells) {
    const panel = el("section", cell.stale ? "cell stale" : "cell");
    const head = el("div", "cell-head");
    head.appendChild(el("h2", undefined, cell.coordinator));
    head.appendChild(el("span", "gateway", cell.gateway));
    if (cell.stale) head.appendChild(el("span", "stale-badge", "stale"));
    head.appendChild(
      el("span", "counts",
         `${cell.members.length} node(s), ${cell.instanceCount} instance(s)`),
    );
    panel.appendChild(head);
    const grid = el("div", "members");
    for (const member of cell.members) {
      grid.appendChild(memberCard(member));
    }
    panel.appendChild(grid);
    root.appendChild(panel);
  }
}

export function renderActions(root: HTMLElement, actions: PendingAction[]): void {
  root.replaceChildren();
  for (const action of actions.slice(0, 12)) {
    const row = el("div", `action ${action.status}`);
    row.appendChild(el("span", "action-kind", action.kind));
    row.appendChild(el("span", "action-summary", action.summary));
    row.appendChild(el("span", "action-status", action.status));
    if (action.detail && action.status !== "ok") {
      row.appendChild(el("div", "action-detail", action.detail));
    }
    root.appendChild(row);
  }
}
