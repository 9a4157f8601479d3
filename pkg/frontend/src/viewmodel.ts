/** Pure view-model layer: service payloads in, renderable structures out.
 *
 * Everything here is deterministic and DOM-free so the rendering shell can
 * be reconstructed from service endpoints alone after a page reload.
 */

import type {
  GraphBranch, GraphBus, GraphPayload, StageName, StepResponse,
} from "./types.js";
import { STAGES } from "./types.js";

// --- alarms -----------------------------------------------------------------

export type BannerLevel = "ok" | "warn" | "alert";

export interface Banner {
  id: string;
  level: BannerLevel;
  text: string;
}

/** Alarm banners for one step response, most severe first. */
export function alarmBanners(step: StepResponse): Banner[] {
  const out: Banner[] = [];
  const a = step.alarms;
  if (step.halted_at !== null) {
    out.push({
      id: "halted", level: "alert",
      text: `pipeline halted at ${step.halted_at} on tick ${step.tick}`,
    });
  }
  if (a.bdd_fail === true) {
    out.push({
      id: "bdd", level: "alert",
      text: "bad data detector: measurement rejected and eliminated",
    });
  } else if (a.bdd_fail === false) {
    out.push({ id: "bdd", level: "ok", text: "bad data detector: pass" });
  }
  if (a.detector === true) {
    out.push({
      id: "detector", level: "alert",
      text: "load anomaly detector: ALARM (suspicious load vector)",
    });
  } else if (a.detector === false) {
    out.push({ id: "detector", level: "ok", text: "load anomaly detector: clear" });
  }
  if (a.rtca_criticals !== null && a.rtca_criticals > 0) {
    out.push({
      id: "rtca", level: "warn",
      text: `contingency screen: ${a.rtca_criticals} critical outage(s)`,
    });
  }
  if (a.sced_slack === true) {
    out.push({
      id: "sced", level: "warn",
      text: "dispatch used emergency slack (load shed or limit relaxation)",
    });
  }
  const rank: Record<BannerLevel, number> = { alert: 0, warn: 1, ok: 2 };
  return out.sort((x, y) => rank[x.level] - rank[y.level]);
}

export interface StageRow {
  stage: StageName;
  status: string;
  durationMs: number | null;
}

export function stageRows(step: StepResponse): StageRow[] {
  return STAGES.map((s) => ({
    stage: s,
    status: step.stages[s] ?? "skipped",
    durationMs: step.durations && s in step.durations
      ? Math.round(step.durations[s] * 1000) : null,
  }));
}

// --- graph view ---------------------------------------------------------------

/** Branch color by loading percent of the continuous rating. */
export function loadingColor(pct: number | null): string {
  if (pct === null || !Number.isFinite(pct)) return "#9aa0a6";
  if (pct > 100) return "#d93025";
  if (pct >= 90) return "#f29900";
  if (pct >= 70) return "#fbbc04";
  return "#188038";
}

export interface NodeView {
  id: number;
  label: string;
  kind: string;
  hasGen: boolean;
  hasLoad: boolean;
  stale: boolean;
  detail: DetailCard;
}

export interface EdgeView {
  id: number;
  from: number;
  to: number;
  color: string;
  violated: boolean;
  stale: boolean;
  detail: DetailCard;
}

export interface DetailCard {
  title: string;
  tick: number | null;
  rows: [string, string][];
}

function fmt(v: number | null | undefined, unit = "", digits = 3): string {
  if (v === null || v === undefined || !Number.isFinite(v)) return "n/a";
  return `${v.toFixed(digits)}${unit}`;
}

export function busDetail(b: GraphBus, tick: number | null): DetailCard {
  return {
    title: `Bus ${b.id} (${b.type})`,
    tick,
    rows: [
      ["base kV", fmt(b.base_kv, " kV", 1)],
      ["voltage", fmt(b.v_mag, " pu")],
      ["angle", fmt(b.v_ang_deg, " deg", 2)],
      ["load", fmt(b.load_mw, " MW", 1)],
      ["generation", fmt(b.gen_mw, " MW", 1)],
    ],
  };
}

export function branchDetail(br: GraphBranch, tick: number | null): DetailCard {
  return {
    title: `Branch ${br.id} (${br.from_bus}-${br.to_bus})`,
    tick,
    rows: [
      ["status", br.status ? "in service" : "out of service"],
      ["rating", fmt(br.s_max, " MVA", 1)],
      ["P from", fmt(br.p_from, " MW", 1)],
      ["loading", fmt(br.loading_pct, " %", 1)],
    ],
  };
}

export interface GraphView {
  tick: number | null;
  stale: boolean;
  nodes: NodeView[];
  edges: EdgeView[];
}

/** Build the renderable graph. The view is stale when the payload's tick
 * lags the session tick; every card carries its tick stamp. */
export function buildGraphView(
  graph: GraphPayload, sessionTick: number,
): GraphView {
  const stale = graph.tick === null || graph.tick < sessionTick;
  return {
    tick: graph.tick,
    stale,
    nodes: graph.buses.map((b) => ({
      id: b.id,
      label: String(b.id),
      kind: b.type,
      hasGen: b.gen_mw > 0,
      hasLoad: b.load_mw > 0,
      stale,
      detail: busDetail(b, graph.tick),
    })),
    edges: graph.branches.filter((br) => br.status).map((br) => ({
      id: br.id,
      from: br.from_bus,
      to: br.to_bus,
      color: loadingColor(br.loading_pct),
      violated: br.loading_pct !== null && br.loading_pct > 100,
      stale,
      detail: branchDetail(br, graph.tick),
    })),
  };
}

// --- layout -----------------------------------------------------------------

export interface Point {
  x: number;
  y: number;
}

/** Deterministic force-directed layout: nodes start on a circle in id order
 * and relax under spring/repulsion forces for a fixed iteration count. No
 * randomness, so the same payload always yields the same picture. */
export function layoutPositions(
  view: GraphView, width: number, height: number, iterations = 200,
): Map<number, Point> {
  const n = view.nodes.length;
  const pos = new Map<number, Point>();
  const cx = width / 2;
  const cy = height / 2;
  const r0 = 0.38 * Math.min(width, height);
  view.nodes.forEach((node, i) => {
    const a = (2 * Math.PI * i) / Math.max(1, n);
    pos.set(node.id, { x: cx + r0 * Math.cos(a), y: cy + r0 * Math.sin(a) });
  });
  if (n < 3) return pos;

  const ideal = r0 * 0.9;
  const step0 = 0.08 * Math.min(width, height);
  for (let it = 0; it < iterations; it++) {
    const step = step0 * (1 - it / iterations);
    const disp = new Map<number, Point>();
    view.nodes.forEach((node) => disp.set(node.id, { x: 0, y: 0 }));
    for (let i = 0; i < n; i++) {
      for (let j = i + 1; j < n; j++) {
        const a = view.nodes[i].id;
        const b = view.nodes[j].id;
        const pa = pos.get(a)!;
        const pb = pos.get(b)!;
        const dx = pa.x - pb.x;
        const dy = pa.y - pb.y;
        const d2 = Math.max(1e-6, dx * dx + dy * dy);
        const f = (ideal * ideal) / d2 / Math.sqrt(d2);
        const da = disp.get(a)!;
        const db = disp.get(b)!;
        da.x += dx * f; da.y += dy * f;
        db.x -= dx * f; db.y -= dy * f;
      }
    }
    for (const e of view.edges) {
      const pa = pos.get(e.from);
      const pb = pos.get(e.to);
      if (!pa || !pb) continue;
      const dx = pa.x - pb.x;
      const dy = pa.y - pb.y;
      const d = Math.max(1e-3, Math.hypot(dx, dy));
      const f = (d * d) / ideal / d / 40;
      const da = disp.get(e.from)!;
      const db = disp.get(e.to)!;
      da.x -= dx * f; da.y -= dy * f;
      db.x += dx * f; db.y += dy * f;
    }
    for (const node of view.nodes) {
      const p = pos.get(node.id)!;
      const d = disp.get(node.id)!;
      const mag = Math.max(1e-9, Math.hypot(d.x, d.y));
      const lim = Math.min(mag, step);
      p.x += (d.x / mag) * lim;
      p.y += (d.y / mag) * lim;
      const m = 30;
      p.x = Math.min(width - m, Math.max(m, p.x));
      p.y = Math.min(height - m, Math.max(m, p.y));
    }
  }
  return pos;
}
