import type {
  ApprovalRequest,
  Decision,
  GraphExport,
  WorkflowEvent,
  WorkflowRecord,
  WorkflowSummary,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let code = "error";
    let message = response.statusText;
    try {
      const body = await response.json();
      code = body.code ?? code;
      message = body.message ?? message;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(response.status, code, message);
  }
  return (await response.json()) as T;
}

/** Thin typed client over the gateway API; all reads are plain GETs so the
 * console can never observe state that is not reconstructible from files. */
export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  listWorkflows(): Promise<WorkflowSummary[]> {
    return this.get("/api/v1/workflows");
  }

  getWorkflow(id: string): Promise<WorkflowRecord> {
    return this.get(`/api/v1/workflows/${id}`);
  }

  getGraph(id: string): Promise<GraphExport> {
    return this.get(`/api/v1/workflows/${id}/graph`);
  }

  async getEvents(id: string, since: number, timeoutSeconds = 25): Promise<WorkflowEvent[]> {
    const body = await this.get<{ events: WorkflowEvent[] }>(
      `/api/v1/workflows/${id}/events?since=${since}&timeout=${timeoutSeconds}`,
    );
    return body.events;
  }

  listApprovals(status = "pending"): Promise<ApprovalRequest[]> {
    return this.get(`/api/v1/approvals?status=${status}`);
  }

  async decide(approvalId: string, decision: Decision, note = ""): Promise<ApprovalRequest> {
    const response = await this.fetchFn(`${this.base}/api/v1/approvals/${approvalId}`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ decision, note }),
    });
    return asJson(response);
  }

  async submit(
    prompt: string,
    dataRoot: string,
    config?: Record<string, unknown>,
  ): Promise<{ workflow_id: string }> {
    const body: Record<string, unknown> = { prompt, data_root: dataRoot };
    if (config) {
      body.config = config;
    }
    const response = await this.fetchFn(`${this.base}/api/v1/workflows`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    return asJson(response);
  }

  async resume(id: string): Promise<{ resumed: boolean; skipped: string[] }> {
    const response = await this.fetchFn(`${this.base}/api/v1/workflows/${id}/resume`, {
      method: "POST",
    });
    return asJson(response);
  }

  artifactUrl(id: string, relpath: string): string {
    return `${this.base}/api/v1/workflows/${id}/artifacts/${relpath}`;
  }

  async fetchArtifactJson<T>(id: string, relpath: string): Promise<T> {
    return this.get(`/api/v1/workflows/${id}/artifacts/${relpath}`);
  }

  private async get<T>(path: string): Promise<T> {
    const response = await this.fetchFn(`${this.base}${path}`);
    return asJson(response);
  }
}
