export const NODE_W = 148;
export const NODE_H = 34;
const GAP_X = 46;
const GAP_Y = 18;
/** Topological layering computed client side: a node's layer is one past the
 * deepest of its dependencies; nodes within a layer sort lexicographically. */
export function layoutGraph(graph) {
    const byId = new Map(graph.nodes.map((n) => [n.step_id, n]));
    const layerOf = new Map();
    const resolve = (stepId, trail) => {
        const known = layerOf.get(stepId);
        if (known !== undefined) {
            return known;
        }
        if (trail.has(stepId)) {
            throw new Error(`cycle through ${stepId}`);
        }
        trail.add(stepId);
        const node = byId.get(stepId);
        if (!node) {
            throw new Error(`unknown step ${stepId}`);
        }
        const depth = node.depends_on.length === 0
            ? 0
            : 1 + Math.max(...node.depends_on.map((d) => resolve(d, trail)));
        trail.delete(stepId);
        layerOf.set(stepId, depth);
        return depth;
    };
    for (const node of graph.nodes) {
        resolve(node.step_id, new Set());
    }
    const layers = new Map();
    for (const [stepId, layer] of layerOf) {
        const bucket = layers.get(layer) ?? [];
        bucket.push(stepId);
        layers.set(layer, bucket);
    }
    const layerCount = layers.size === 0 ? 0 : Math.max(...layers.keys()) + 1;
    const tallest = Math.max(1, ...[...layers.values()].map((b) => b.length));
    const nodes = [];
    for (let layer = 0; layer < layerCount; layer += 1) {
        const bucket = (layers.get(layer) ?? []).sort();
        bucket.forEach((stepId, slot) => {
            nodes.push({
                stepId,
                layer,
                slot,
                x: 10 + layer * (NODE_W + GAP_X),
                y: 10 + slot * (NODE_H + GAP_Y),
            });
        });
    }
    const edges = [];
    for (const node of graph.nodes) {
        for (const dep of node.depends_on) {
            edges.push({ from: dep, to: node.step_id });
        }
    }
    return {
        nodes,
        edges,
        layers: layerCount,
        width: 20 + layerCount * (NODE_W + GAP_X),
        height: 20 + tallest * (NODE_H + GAP_Y),
    };
}
