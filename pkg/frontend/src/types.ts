/** Client-side mirrors of the gateway's JSON payloads. Nothing here is
 * invented client-side: shapes follow the documented API responses. */

export type StepStatus =
  | "PENDING"
  | "RUNNING"
  | "COMPLETED"
  | "FAILED"
  | "AWAITING_APPROVAL"
  | "SKIPPED";

export interface StepRecord {
  step_id: string;
  status: StepStatus;
  attempts: number;
  started_at: string | null;
  finished_at: string | null;
  wall_seconds: number;
  prompt_tokens: number;
  completion_tokens: number;
  workspace_path: string;
  last_error: string | null;
  outputs: Record<string, string>;
  note: string | null;
}

export interface WorkflowRecord {
  workflow_id: string;
  prompt: string;
  phase: string;
  graph_digest: string;
  steps: Record<string, StepRecord>;
  approvals: Record<string, ApprovalRequest>;
  updated_at: string;
  created_at: string;
}

export interface WorkflowSummary {
  workflow_id: string;
  prompt: string;
  phase: string;
  steps_total: number;
  steps_completed: number;
  updated_at: string;
}

export interface ApprovalRequest {
  approval_id: string;
  workflow_id: string;
  step_id: string;
  reason: string;
  requested_at: string;
  decision: "PENDING" | "APPROVED" | "REJECTED" | "RETRY";
  decided_at: string | null;
  note: string;
}

export interface GraphNode {
  step_id: string;
  modality: string | null;
  tool_id: string;
  depends_on: string[];
  output_schema_id: string;
  phase: string;
}

export interface GraphExport {
  nodes: GraphNode[];
}

export interface WorkflowEvent {
  seq: number;
  workflow_id: string;
  kind: string;
  payload: Record<string, unknown>;
  at: string;
}

export interface FigureGroup {
  name: string;
  points: [number, number][];
  fit: { slope: number; intercept: number; p: number };
  summary: {
    n: number;
    median: number;
    q1: number;
    q3: number;
    whisker_low: number;
    whisker_high: number;
  } | null;
}

export interface FigureDoc {
  kind: "SCATTER_FIT" | "GROUP_BOX";
  feature: string;
  x_label: string;
  y_label: string;
  groups: FigureGroup[];
}

export type Decision = "approve" | "reject" | "retry";
