/**
 * Console bootstrap. Gateways come from ?gateways=URL,URL or default to the
 * demo bridge ports. Reads never mutate; actions fire only on explicit
 * submit.
 */

import { ActionLog } from "./actions.js";
import { Poller } from "./poller.js";
import { renderActions, renderCells } from "./ui.js";

function gatewayList(): string[] {
  const param = new URLSearchParams(window.location.search).get("gateways");
  if (param) {
    return param.split(",").map((g) => g.trim()).filter(Boolean);
  }
  return ["http://127.0.0.1:8800", "http://127.0.0.1:8801"];
}

function field(id: string): HTMLInputElement {
  return document.getElementById(id) as HTMLInputElement;
}

function main(): void {
  const gateways = gatewayList();
  const cellsRoot = document.getElementById("cells")!;
  const actionsRoot = document.getElementById("actions")!;
  const gatewaySelects = ["transfer-gateway", "submit-gateway",
                          "terminate-gateway"].map(
    (id) => document.getElementById(id) as HTMLSelectElement,
  );
  for (const select of gatewaySelects) {
    for (const gateway of gateways) {
      const option = document.createElement("option");
      option.value = gateway;
      option.textContent = gateway;
      select.appendChild(option);
    }
  }

  const log = new ActionLog(() => renderActions(actionsRoot, log.entries));
  const poller = new Poller(gateways, (cells) => renderCells(cellsRoot, cells));

  document.getElementById("transfer-form")!.addEventListener("submit", (e) => {
    e.preventDefault();
    void log
      .transfer(
        (document.getElementById("transfer-gateway") as HTMLSelectElement).value,
        field("transfer-primary").value.trim(),
        field("transfer-dest").value.trim(),
      )
      .then(() => poller.pollOnce());
  });

  document.getElementById("submit-form")!.addEventListener("submit", (e) => {
    e.preventDefault();
    const text = (document.getElementById("submit-pipeline") as
                  HTMLTextAreaElement).value;
    let pipeline: { tasks: unknown[] };
    try {
      pipeline = JSON.parse(text);
    } catch (err) {
      alert(`pipeline is not valid JSON: ${err}`);
      return;
    }
    void log
      .submit(
        (document.getElementById("submit-gateway") as HTMLSelectElement).value,
        pipeline,
      )
      .then(() => poller.pollOnce());
  });

  document.getElementById("terminate-form")!.addEventListener("submit", (e) => {
    e.preventDefault();
    void log
      .terminate(
        (document.getElementById("terminate-gateway") as HTMLSelectElement).value,
        field("terminate-task").value.trim(),
      )
      .then(() => poller.pollOnce());
  });

  poller.start();
}

main();
