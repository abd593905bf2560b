export class ApiError extends Error {
    constructor(status, code, message) {
        super(message);
        this.status = status;
        this.code = code;
    }
}
async function asJson(response) {
    if (!response.ok) {
        let code = "error";
        let message = response.statusText;
        try {
            const body = await response.json();
            code = body.code ?? code;
            message = body.message ?? message;
        }
        catch {
            /* non-JSON error body */
        }
        throw new ApiError(response.status, code, message);
    }
    return (await response.json());
}
/** Thin typed client over the gateway API; all reads are plain GETs so the
 * console can never observe state that is not reconstructible from files. */
export class ApiClient {
    constructor(base = "", fetchFn = fetch) {
        this.base = base;
        this.fetchFn = fetchFn;
    }
    listWorkflows() {
        return this.get("/api/v1/workflows");
    }
    getWorkflow(id) {
        return this.get(`/api/v1/workflows/${id}`);
    }
    getGraph(id) {
        return this.get(`/api/v1/workflows/${id}/graph`);
    }
    async getEvents(id, since, timeoutSeconds = 25) {
        const body = await this.get(`/api/v1/workflows/${id}/events?since=${since}&timeout=${timeoutSeconds}`);
        return body.events;
    }
    listApprovals(status = "pending") {
        return this.get(`/api/v1/approvals?status=${status}`);
    }
    async decide(approvalId, decision, note = "") {
        const response = await this.fetchFn(`${this.base}/api/v1/approvals/${approvalId}`, {
            method: "POST",
            headers: { "Content-Type": "application/json" },
            body: JSON.stringify({ decision, note }),
        });
        return asJson(response);
    }
    async submit(prompt, dataRoot, config) {
        const body = { prompt, data_root: dataRoot };
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
    async resume(id) {
        const response = await this.fetchFn(`${this.base}/api/v1/workflows/${id}/resume`, {
            method: "POST",
        });
        return asJson(response);
    }
    artifactUrl(id, relpath) {
        return `${this.base}/api/v1/workflows/${id}/artifacts/${relpath}`;
    }
    async fetchArtifactJson(id, relpath) {
        return this.get(`/api/v1/workflows/${id}/artifacts/${relpath}`);
    }
    async get(path) {
        const response = await this.fetchFn(`${this.base}${path}`);
        return asJson(response);
    }
}
