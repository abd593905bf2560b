/** Console bootstrap: hash routing, one long-poll loop per open workflow
 * view, and decision POSTs serialized per approval card. */
import { ApiClient, ApiError } from "./api.js";
import { layoutGraph } from "./dagLayout.js";
import { retryDelayMs, WorkflowStore } from "./store.js";
import { renderApprovalQueue, renderBanner, renderDag, renderDashboard, renderFigure, renderNodeDetails, } from "./views.js";
const api = new ApiClient("");
const app = () => document.getElementById("app");
const banner = () => document.getElementById("banner");
let pollAbort = null;
function stopPolling() {
    if (pollAbort) {
        pollAbort.stopped = true;
        pollAbort = null;
    }
}
async function showDashboard() {
    stopPolling();
    const workflows = await api.listWorkflows();
    app().innerHTML = `
    <h2>Workflows</h2>
    ${renderDashboard(workflows)}
    <form id="submit-form" class="submit-form">
      <input name="prompt" placeholder="research goal" size="48" required>
      <input name="data_root" placeholder="data root" size="32" required>
      <button type="submit">run</button>
    </form>`;
    const token = { stopped: false };
    pollAbort = token;
    const refresh = async () => {
        while (!token.stopped) {
            await sleep(2000);
            if (token.stopped) {
                return;
            }
            try {
                const latest = await api.listWorkflows();
                const table = app().querySelector(".dashboard, .empty");
                if (table) {
                    table.outerHTML = renderDashboard(latest);
                }
            }
            catch {
                /* transient; next tick retries */
            }
        }
    };
    void refresh();
    const form = document.getElementById("submit-form");
    form.addEventListener("submit", async (event) => {
        event.preventDefault();
        const data = new FormData(form);
        try {
            const created = await api.submit(String(data.get("prompt") ?? ""), String(data.get("data_root") ?? ""));
            location.hash = `#/wf/${created.workflow_id}`;
        }
        catch (error) {
            flashBanner(error instanceof Error ? error.message : String(error));
        }
    });
}
async function showWorkflow(workflowId) {
    stopPolling();
    const store = new WorkflowStore();
    let graph;
    try {
        graph = await api.getGraph(workflowId);
    }
    catch (error) {
        app().innerHTML = renderBanner(`no graph for ${workflowId}: ${String(error)}`);
        return;
    }
    const layout = layoutGraph(graph);
    let selected = null;
    const rerender = () => {
        const record = store.snapshot.record;
        const phase = record?.phase ?? "…";
        const step = selected && record ? (record.steps[selected] ?? null) : null;
        app().innerHTML = `
      <h2>${workflowId} <span class="phase phase-${phase}">${phase}</span></h2>
      <div class="columns">
        <div class="dag-pane">${renderDag(layout, record)}</div>
        <aside class="details-pane">
          ${renderNodeDetails(step)}
          <h4>event feed</h4>
          <ul class="event-feed">
            ${store.snapshot.events
            .slice(-14)
            .map((e) => `<li><code>#${e.seq}</code> ${e.kind} ${JSON.stringify(e.payload)}</li>`)
            .join("")}
          </ul>
          <p><a href="${api.artifactUrl(workflowId, "integrate.manifest/out/final_data_list.csv")}">final_data_list.csv</a></p>
        </aside>
      </div>`;
        app()
            .querySelectorAll(".dag-node")
            .forEach((node) => {
            node.addEventListener("click", () => {
                selected = node.dataset.step ?? null;
                rerender();
            });
        });
    };
    store.subscribe(rerender);
    store.applySnapshot(await api.getWorkflow(workflowId));
    const token = { stopped: false };
    pollAbort = token;
    const loop = async () => {
        let failures = 0;
        while (!token.stopped) {
            try {
                const events = await api.getEvents(workflowId, store.snapshot.cursor, 20);
                failures = 0;
                if (token.stopped) {
                    return;
                }
                if (events.length > 0) {
                    store.applyEvents(events);
                    store.applySnapshot(await api.getWorkflow(workflowId));
                }
            }
            catch {
                failures += 1;
                await sleep(retryDelayMs(failures));
            }
        }
    };
    void loop();
}
async function showApprovals() {
    stopPolling();
    const render = (approvals) => {
        app().innerHTML = `<h2>Approval queue</h2>${renderApprovalQueue(approvals)}`;
        app()
            .querySelectorAll("button[data-decision]")
            .forEach((button) => {
            button.addEventListener("click", async () => {
                const approvalId = button.dataset.approval ?? "";
                const decision = button.dataset.decision;
                const card = button.closest(".approval-card");
                if (card) {
                    card.style.opacity = "0.4"; // optimistic removal
                }
                try {
                    await api.decide(approvalId, decision);
                    card?.remove();
                }
                catch (error) {
                    if (error instanceof ApiError && error.status === 409) {
                        flashBanner(`already decided elsewhere: ${error.message}`);
                    }
                    else {
                        flashBanner(String(error));
                    }
                    void showApprovals(); // conflict: re-fetch the queue
                }
            });
        });
    };
    render(await api.listApprovals());
    const token = { stopped: false };
    pollAbort = token;
    const loop = async () => {
        while (!token.stopped) {
            await sleep(2000);
            if (token.stopped) {
                return;
            }
            try {
                render(await api.listApprovals());
            }
            catch {
                /* retry next tick */
            }
        }
    };
    void loop();
}
async function showResults(workflowId, relpath) {
    stopPolling();
    const hidden = new Set();
    let doc;
    try {
        doc = await api.fetchArtifactJson(workflowId, relpath);
    }
    catch (error) {
        app().innerHTML = renderBanner(`cannot load figure: ${String(error)}`);
        return;
    }
    const rerender = () => {
        app().innerHTML = `
      <h2>Results: ${doc.feature}</h2>
      ${renderFigure(doc, hidden)}
      <p><a href="${api.artifactUrl(workflowId, relpath)}">raw JSON</a></p>`;
        app()
            .querySelectorAll(".group-toggle")
            .forEach((button) => {
            button.addEventListener("click", () => {
                const name = button.dataset.group ?? "";
                if (hidden.has(name)) {
                    hidden.delete(name);
                }
                else {
                    hidden.add(name);
                }
                rerender();
            });
        });
    };
    rerender();
}
function flashBanner(message) {
    banner().innerHTML = renderBanner(message);
    setTimeout(() => {
        banner().innerHTML = "";
    }, 6000);
}
function sleep(ms) {
    return new Promise((resolve) => setTimeout(resolve, ms));
}
async function route() {
    const hash = location.hash || "#/";
    const workflowMatch = hash.match(/^#\/wf\/([^/]+)$/);
    const resultsMatch = hash.match(/^#\/results\/([^/]+)\/(.+)$/);
    try {
        if (hash === "#/" || hash === "") {
            await showDashboard();
        }
        else if (workflowMatch) {
            await showWorkflow(workflowMatch[1]);
        }
        else if (hash === "#/approvals") {
            await showApprovals();
        }
        else if (resultsMatch) {
            await showResults(resultsMatch[1], resultsMatch[2]);
        }
        else {
            app().innerHTML = renderBanner(`unknown route ${hash}`);
        }
    }
    catch (error) {
        app().innerHTML = renderBanner(String(error));
    }
}
window.addEventListener("hashchange", () => void route());
window.addEventListener("DOMContentLoaded", () => void route());
