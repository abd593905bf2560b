/** Per-workflow client state: the latest fetched snapshot plus a monotone
 * event cursor. Stale data can never overwrite newer data. */
export class WorkflowStore {
    constructor() {
        this.state = { record: null, cursor: 0, events: [] };
        this.listeners = [];
    }
    get snapshot() {
        return this.state;
    }
    subscribe(listener) {
        this.listeners.push(listener);
        return () => {
            this.listeners = this.listeners.filter((l) => l !== listener);
        };
    }
    /** Accept a snapshot only if it is not older than what we already show. */
    applySnapshot(record) {
        const current = this.state.record;
        if (current && record.updated_at < current.updated_at) {
            return false;
        }
        this.state = { ...this.state, record };
        this.emit();
        return true;
    }
    /** Append events with seq beyond the cursor; duplicates and replays are
     * dropped, so each event is rendered exactly once, in order. */
    applyEvents(events) {
        const fresh = events
            .filter((e) => e.seq > this.state.cursor)
            .sort((a, b) => a.seq - b.seq);
        if (fresh.length === 0) {
            return [];
        }
        this.state = {
            ...this.state,
            cursor: fresh[fresh.length - 1].seq,
            events: [...this.state.events, ...fresh],
        };
        this.emit();
        return fresh;
    }
    emit() {
        for (const listener of this.listeners) {
            listener(this.state);
        }
    }
}
/** Jittered backoff for the long-poll loop: base delay grows with consecutive
 * failures, +/- up to 25% jitter, capped. */
export function retryDelayMs(failures, random = Math.random, baseMs = 500, capMs = 10_000) {
    const exp = Math.min(baseMs * 2 ** Math.max(failures - 1, 0), capMs);
    const jitter = 1 + (random() * 0.5 - 0.25);
    return Math.round(exp * jitter);
}
