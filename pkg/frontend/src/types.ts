/** Wire types of the EMS service HTTP API consumed by the console. */

export type StageName = "pf" | "telemetry" | "se" | "detector" | "rtca" | "sced";

export const STAGES: readonly StageName[] = [
  "pf", "telemetry", "se", "detector", "rtca", "sced",
];

export type StageStatus = "ok" | "failed" | "skipped";

export interface StepAlarms {
  bdd_fail: boolean | null;
  detector: boolean | null;
  rtca_criticals: number | null;
  sced_slack: boolean | null;
}

export interface StepResponse {
  event: "step";
  tick: number;
  stages: Record<StageName, StageStatus>;
  alarms: StepAlarms;
  halted_at: string | null;
  artifact_hash: string;
  prev_hash: string;
  hash: string;
  durations: Record<string, number>;
}

export interface SessionStatus {
  id: string;
  tick: number;
  n_bus: number;
  n_branch: number;
  n_events: number;
  attack_armed: Record<string, unknown> | null;
  detector_calibrated: boolean;
}

export interface GraphBus {
  id: number;
  type: string;
  base_kv: number;
  v_mag: number | null;
  v_ang_deg: number | null;
  load_mw: number;
  gen_mw: number;
}

export interface GraphBranch {
  id: number;
  from_bus: number;
  to_bus: number;
  s_max: number;
  status: boolean;
  loading_pct: number | null;
  p_from: number | null;
}

export interface GraphPayload {
  tick: number | null;
  buses: GraphBus[];
  branches: GraphBranch[];
}

export interface Artifact {
  stage: StageName;
  tick: number;
  input_hash: string;
  hash: string;
  data: Record<string, unknown>;
}

export interface AttackPayload {
  kind: "state" | "gross";
  u_by_bus?: Record<string, number>;
  measurement_index?: number;
  sigma_multiple?: number;
}
