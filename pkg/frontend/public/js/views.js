import { NODE_H, NODE_W } from "./dagLayout.js";
export function escapeHtml(text) {
    return text
        .replaceAll("&", "&amp;")
        .replaceAll("<", "&lt;")
        .replaceAll(">", "&gt;")
        .replaceAll('"', "&quot;")
        .replaceAll("'", "&#39;");
}
export const STATUS_COLORS = {
    PENDING: "#8888a0",
    RUNNING: "#3b82f6",
    COMPLETED: "#22c55e",
    FAILED: "#ef4444",
    AWAITING_APPROVAL: "#eab308",
    SKIPPED: "#64748b",
};
export function renderDashboard(workflows) {
    if (workflows.length === 0) {
        return `<p class="empty">No workflows yet. Submit one below.</p>`;
    }
    const rows = workflows
        .map((w) => `
      <tr data-workflow="${escapeHtml(w.workflow_id)}" class="wf-row">
        <td><a href="#/wf/${escapeHtml(w.workflow_id)}">${escapeHtml(w.workflow_id)}</a></td>
        <td class="prompt-cell">${escapeHtml(w.prompt)}</td>
        <td><span class="phase phase-${escapeHtml(w.phase)}">${escapeHtml(w.phase)}</span></td>
        <td>${w.steps_completed}/${w.steps_total}</td>
        <td>${escapeHtml(w.updated_at)}</td>
      </tr>`)
        .join("");
    return `
    <table class="dashboard">
      <thead><tr><th>Workflow</th><th>Prompt</th><th>Phase</th><th>Steps</th><th>Updated</th></tr></thead>
      <tbody>${rows}</tbody>
    </table>`;
}
export function renderDag(layout, record) {
    const positions = new Map(layout.nodes.map((n) => [n.stepId, n]));
    const edges = layout.edges
        .map((edge) => {
        const from = positions.get(edge.from);
        const to = positions.get(edge.to);
        if (!from || !to) {
            return "";
        }
        const x1 = from.x + NODE_W;
        const y1 = from.y + NODE_H / 2;
        const x2 = to.x;
        const y2 = to.y + NODE_H / 2;
        return `<path d="M${x1},${y1} C${x1 + 24},${y1} ${x2 - 24},${y2} ${x2},${y2}" class="edge"/>`;
    })
        .join("");
    const nodes = layout.nodes
        .map((node) => {
        const status = record?.steps[node.stepId]?.status ?? "PENDING";
        const color = STATUS_COLORS[status] ?? "#8888a0";
        return `
      <g class="dag-node" data-step="${escapeHtml(node.stepId)}" transform="translate(${node.x},${node.y})">
        <rect width="${NODE_W}" height="${NODE_H}" rx="6" fill="${color}" fill-opacity="0.18" stroke="${color}"/>
        <text x="8" y="${NODE_H / 2 + 4}" class="node-label">${escapeHtml(node.stepId)}</text>
      </g>`;
    })
        .join("");
    return `
    <svg class="dag" viewBox="0 0 ${layout.width} ${layout.height}" width="${layout.width}" height="${layout.height}">
      ${edges}
      ${nodes}
    </svg>`;
}
export function renderNodeDetails(step) {
    if (!step) {
        return `<p class="empty">Select a node to inspect attempts and feedback.</p>`;
    }
    const error = step.last_error
        ? `<pre class="error-tail">${escapeHtml(step.last_error)}</pre>`
        : `<p class="empty">no recorded error</p>`;
    const note = step.note ? `<p class="note">${escapeHtml(step.note)}</p>` : "";
    return `
    <div class="node-details">
      <h3>${escapeHtml(step.step_id)}</h3>
      <p>
        <span class="phase phase-${escapeHtml(step.status)}">${escapeHtml(step.status)}</span>
        attempts=${step.attempts}
        wall=${step.wall_seconds.toFixed(2)}s
      </p>
      ${note}
      <h4>last stderr / validation feedback</h4>
      ${error}
    </div>`;
}
export function renderApprovalQueue(approvals) {
    if (approvals.length === 0) {
        return `<p class="empty">No pending approvals.</p>`;
    }
    const cards = approvals
        .map((a) => `
    <div class="approval-card" data-approval="${escapeHtml(a.approval_id)}">
      <header>
        <strong>${escapeHtml(a.step_id)}</strong>
        <span class="wf-ref">${escapeHtml(a.workflow_id)}</span>
        <time>${escapeHtml(a.requested_at)}</time>
      </header>
      <pre class="reason">${escapeHtml(a.reason)}</pre>
      <div class="actions">
        <button class="approve" data-approval="${escapeHtml(a.approval_id)}" data-decision="approve">approve</button>
        <button class="retry" data-approval="${escapeHtml(a.approval_id)}" data-decision="retry">retry</button>
        <button class="reject" data-approval="${escapeHtml(a.approval_id)}" data-decision="reject">reject</button>
      </div>
    </div>`)
        .join("");
    return `<div class="approval-queue">${cards}</div>`;
}
export function renderBanner(message) {
    return `<div class="banner">${escapeHtml(message)}</div>`;
}
const GROUP_COLORS = ["#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4"];
export function groupColor(index) {
    return GROUP_COLORS[index % GROUP_COLORS.length];
}
/** Figure renderer: every number shown comes from the fetched JSON; only
 * scaling for display happens here. Hidden groups stay in the legend so they
 * can be toggled back. */
export function renderFigure(doc, hidden) {
    const width = 560;
    const height = 360;
    const pad = 46;
    const visible = doc.groups.filter((g) => !hidden.has(g.name));
    const points = visible.flatMap((g) => g.points);
    const xs = points.map((p) => p[0]);
    const ys = points.map((p) => p[1]);
    const xLo = xs.length ? Math.min(...xs) : 0;
    const xHi = xs.length ? Math.max(...xs) : 1;
    const yValues = ys.concat(visible.flatMap((g) => g.summary ? [g.summary.whisker_low, g.summary.whisker_high] : []));
    const yLo = yValues.length ? Math.min(...yValues) : 0;
    const yHi = yValues.length ? Math.max(...yValues) : 1;
    const xSpan = xHi - xLo || 1;
    const ySpan = yHi - yLo || 1;
    const sx = (x) => pad + ((x - xLo) / xSpan) * (width - 2 * pad);
    const sy = (y) => height - pad - ((y - yLo) / ySpan) * (height - 2 * pad);
    const parts = [];
    if (doc.kind === "SCATTER_FIT") {
        doc.groups.forEach((group, gi) => {
            if (hidden.has(group.name)) {
                return;
            }
            const color = groupColor(gi);
            for (const [x, y] of group.points) {
                parts.push(`<circle class="series series-${escapeHtml(group.name)}" cx="${sx(x).toFixed(1)}" cy="${sy(y).toFixed(1)}" r="2.6" fill="${color}" fill-opacity="0.55"><title>${escapeHtml(group.name)}: (${x}, ${y})</title></circle>`);
            }
            const y0 = group.fit.intercept + group.fit.slope * xLo;
            const y1 = group.fit.intercept + group.fit.slope * xHi;
            parts.push(`<line class="fit fit-${escapeHtml(group.name)}" x1="${sx(xLo).toFixed(1)}" y1="${sy(y0).toFixed(1)}" x2="${sx(xHi).toFixed(1)}" y2="${sy(y1).toFixed(1)}" stroke="${color}" stroke-width="1.8"><title>${escapeHtml(group.name)} fit: slope=${group.fit.slope} p=${group.fit.p}</title></line>`);
        });
    }
    else {
        const slotWidth = (width - 2 * pad) / Math.max(doc.groups.length, 1);
        doc.groups.forEach((group, gi) => {
            if (hidden.has(group.name) || !group.summary) {
                return;
            }
            const color = groupColor(gi);
            const cx = pad + slotWidth * (gi + 0.5);
            const s = group.summary;
            const boxW = Math.min(slotWidth * 0.5, 70);
            parts.push(`<g class="series series-${escapeHtml(group.name)}">` +
                `<line x1="${cx}" y1="${sy(s.whisker_low).toFixed(1)}" x2="${cx}" y2="${sy(s.whisker_high).toFixed(1)}" stroke="${color}"/>` +
                `<rect x="${(cx - boxW / 2).toFixed(1)}" y="${sy(s.q3).toFixed(1)}" width="${boxW}" height="${(sy(s.q1) - sy(s.q3)).toFixed(1)}" fill="${color}" fill-opacity="0.25" stroke="${color}"/>` +
                `<line x1="${(cx - boxW / 2).toFixed(1)}" y1="${sy(s.median).toFixed(1)}" x2="${(cx + boxW / 2).toFixed(1)}" y2="${sy(s.median).toFixed(1)}" stroke="${color}" stroke-width="2"><title>${escapeHtml(group.name)}: median=${s.median} q1=${s.q1} q3=${s.q3} n=${s.n}</title></line>` +
                `<text x="${cx}" y="${height - pad + 16}" text-anchor="middle" class="axis-label">${escapeHtml(group.name)}</text>` +
                `</g>`);
        });
    }
    const toggles = doc.groups
        .map((group, gi) => {
        const active = hidden.has(group.name) ? "off" : "on";
        return `<button class="group-toggle toggle-${active}" data-group="${escapeHtml(group.name)}" style="border-color: ${groupColor(gi)}">${escapeHtml(group.name)}</button>`;
    })
        .join("");
    return `
    <div class="figure" data-kind="${escapeHtml(doc.kind)}">
      <div class="figure-toggles">${toggles}</div>
      <svg viewBox="0 0 ${width} ${height}" width="${width}" height="${height}">
        <rect x="${pad}" y="${pad}" width="${width - 2 * pad}" height="${height - 2 * pad}" fill="none" stroke="#666"/>
        <text x="${width / 2}" y="${height - 8}" text-anchor="middle" class="axis-label">${escapeHtml(doc.x_label)}</text>
        <text x="14" y="${height / 2}" text-anchor="middle" transform="rotate(-90 14 ${height / 2})" class="axis-label">${escapeHtml(doc.y_label)}</text>
        ${parts.join("\n")}
      </svg>
    </div>`;
}
