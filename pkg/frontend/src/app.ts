/** DOM shell of the operator console.
 *
 * Left: one-line system graph (SVG, click for detail cards, branch color
 * encodes loading). Right: control panel whose buttons map 1:1 to service
 * endpoints, stage status table, alarm banners, report browser. State is
 * polled every second; the console keeps no engine truth of its own.
 */

import { ApiClient, ApiError } from "./api.js";
import type {
  AttackPayload, GraphPayload, SessionStatus, StageName, StepResponse,
} from "./types.js";
import { STAGES } from "./types.js";
import {
  alarmBanners, buildGraphView, layoutPositions, stageRows,
  type DetailCard, type GraphView,
} from "./viewmodel.js";

const POLL_MS = 1000;

export class App {
  private sid: string | null = null;
  private status: SessionStatus | null = null;
  private lastStep: StepResponse | null = null;
  private graph: GraphPayload | null = null;
  private selected: DetailCard | null = null;
  private error: string | null = null;
  private timer: number | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ApiClient = new ApiClient(""),
  ) {}

  start(): void {
    this.render();
    this.timer = window.setInterval(() => void this.poll(), POLL_MS);
  }

  stop(): void {
    if (this.timer !== null) window.clearInterval(this.timer);
  }

  private async poll(): Promise<void> {
    if (!this.sid) return;
    try {
      const [status, graph] = await Promise.all([
        this.api.status(this.sid),
        this.api.graph(this.sid),
      ]);
      this.status = status;
      this.graph = graph;
      this.error = null;
    } catch (e) {
      this.error = e instanceof ApiError
        ? e.message : "connection lost; retrying";
    }
    this.render();
  }

  private async act(label: string, fn: () => Promise<unknown>): Promise<void> {
    try {
      await fn();
      this.error = null;
    } catch (e) {
      this.error = e instanceof ApiError ? e.message : `${label} failed`;
    }
    await this.poll();
  }

  private async createSession(caseText: string, seed: number): Promise<void> {
    await this.act("create session", async () => {
      const doc = JSON.parse(caseText);
      const st = await this.api.createSession(doc, seed);
      this.sid = st.id;
      this.status = st;
      this.lastStep = null;
    });
  }

  private async step(): Promise<void> {
    if (!this.sid) return;
    await this.act("step", async () => {
      this.lastStep = await this.api.step(this.sid!);
    });
  }

  private async armState(busText: string): Promise<void> {
    if (!this.sid) return;
    await this.act("arm attack", async () => {
      const u = JSON.parse(busText) as Record<string, number>;
      const payload: AttackPayload = { kind: "state", u_by_bus: u };
      await this.api.armAttack(this.sid!, payload);
    });
  }

  private async viewReport(stage: StageName, tick: number): Promise<void> {
    if (!this.sid) return;
    await this.act("report", async () => {
      const art = await this.api.report(this.sid!, stage, tick);
      this.selected = {
        title: `${stage} report, tick ${art.tick}`,
        tick: art.tick,
        rows: [["hash", art.hash.slice(0, 16) + "..."],
               ["data", JSON.stringify(art.data).slice(0, 4000)]],
      };
    });
  }

  // --- rendering ----------------------------------------------------------

  private render(): void {
    this.root.replaceChildren(
      this.renderGraphPane(),
      this.renderControlPane(),
    );
  }

  private renderGraphPane(): HTMLElement {
    const pane = el("div", "graph-pane");
    if (!this.graph || !this.status) {
      pane.append(el("p", "placeholder", "no session loaded"));
      return pane;
    }
    const view = buildGraphView(this.graph, this.status.tick);
    pane.append(this.renderSvg(view));
    if (view.stale) {
      pane.append(el("p", "stale-flag",
        `view is stale (tick ${view.tick ?? "none"} of ${this.status.tick})`));
    }
    if (this.selected) pane.append(renderCard(this.selected));
    return pane;
  }

  private renderSvg(view: GraphView): SVGSVGElement {
    const W = 640;
    const H = 560;
    const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("viewBox", `0 0 ${W} ${H}`);
    svg.classList.add("oneline");
    const pos = layoutPositions(view, W, H);
    for (const e of view.edges) {
      const a = pos.get(e.from)!;
      const b = pos.get(e.to)!;
      const line = document.createElementNS(svg.namespaceURI, "line");
      line.setAttribute("x1", String(a.x));
      line.setAttribute("y1", String(a.y));
      line.setAttribute("x2", String(b.x));
      line.setAttribute("y2", String(b.y));
      line.setAttribute("stroke", e.color);
      line.setAttribute("stroke-width", e.violated ? "5" : "2.5");
      line.addEventListener("click", () => {
        this.selected = e.detail;
        this.render();
      });
      svg.append(line);
    }
    for (const n of view.nodes) {
      const p = pos.get(n.id)!;
      const c = document.createElementNS(svg.namespaceURI, "circle");
      c.setAttribute("cx", String(p.x));
      c.setAttribute("cy", String(p.y));
      c.setAttribute("r", n.hasGen ? "11" : "8");
      c.setAttribute("fill", n.hasGen ? "#1a73e8" : "#5f6368");
      c.addEventListener("click", () => {
        this.selected = n.detail;
        this.render();
      });
      const t = document.createElementNS(svg.namespaceURI, "text");
      t.setAttribute("x", String(p.x + 12));
      t.setAttribute("y", String(p.y + 4));
      t.textContent = n.label;
      svg.append(c, t);
    }
    return svg;
  }

  private renderControlPane(): HTMLElement {
    const pane = el("div", "control-pane");
    if (this.error) pane.append(el("div", "banner alert", this.error));

    if (!this.sid) {
      pane.append(this.renderSessionForm());
      return pane;
    }
    const st = this.status;
    pane.append(el("div", "session-line",
      `session ${this.sid.slice(0, 8)} | tick ${st?.tick ?? "?"} | ` +
      `detector ${st?.detector_calibrated ? "calibrated" : "uncalibrated"} | ` +
      `attack ${st?.attack_armed ? "ARMED" : "disarmed"}`));

    if (this.lastStep) {
      for (const b of alarmBanners(this.lastStep)) {
        pane.append(el("div", `banner ${b.level}`, b.text));
      }
      const table = el("table", "stages");
      for (const row of stageRows(this.lastStep)) {
        const tr = el("tr", `stage-${row.status}`);
        tr.append(el("td", "", row.stage), el("td", "", row.status),
          el("td", "", row.durationMs === null ? "" : `${row.durationMs} ms`));
        table.append(tr);
      }
      pane.append(table);
    }

    pane.append(
      button("Step", () => void this.step()),
      button("Calibrate detector", () => void this.act("calibrate",
        () => this.api.calibrateDetector(this.sid!, {}))),
      button("Disarm attack", () => void this.act("disarm",
        () => this.api.disarmAttack(this.sid!))),
    );

    const armBox = el("textarea", "arm-input") as HTMLTextAreaElement;
    armBox.value = '{"13": 0.003, "12": -0.002}';
    pane.append(armBox, button("Arm state attack",
      () => void this.armState(armBox.value)));

    const stageSel = el("select", "") as HTMLSelectElement;
    for (const s of STAGES) {
      const o = el("option", "", s) as HTMLOptionElement;
      o.value = s;
      stageSel.append(o);
    }
    pane.append(stageSel, button("View report", () => void this.viewReport(
      stageSel.value as StageName, this.status?.tick ?? 0)));
    return pane;
  }

  private renderSessionForm(): HTMLElement {
    const box = el("div", "session-form");
    const ta = el("textarea", "case-input") as HTMLTextAreaElement;
    ta.placeholder = "paste a case JSON document";
    const seed = el("input", "") as HTMLInputElement;
    seed.type = "number";
    seed.value = "0";
    box.append(ta, seed, button("Create session",
      () => void this.createSession(ta.value, Number(seed.value))));
    return box;
  }
}

function el(tag: string, cls: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function button(label: string, onClick: () => void): HTMLElement {
  const b = el("button", "", label);
  b.addEventListener("click", onClick);
  return b;
}

function renderCard(card: DetailCard): HTMLElement {
  const box = el("div", "detail-card");
  box.append(el("h3", "", card.title));
  box.append(el("p", "tick-stamp", `tick ${card.tick ?? "none"}`));
  const table = el("table", "");
  for (const [k, v] of card.rows) {
    const tr = el("tr", "");
    tr.append(el("td", "", k), el("td", "", v));
    table.append(tr);
  }
  box.append(table);
  return box;
}
