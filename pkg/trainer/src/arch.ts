/** Architecture document parsing and the checks needed to build a network
 * from one. Documents are the "archgraph/1" JSON objects the engine sends
 * inside evaluation requests: integer-attributed layer nodes in topological
 * order plus edges whose endpoints must agree on (channels, spatial). A node
 * with several predecessors sums them before applying its own operation.
 */

export const DOCUMENT_FORMAT = "archgraph/1";

export const LAYER_TYPES = [
  "conv",
  "conv_dw",
  "batch_norm",
  "relu",
  "max_pool",
  "avg_pool",
  "fc",
  "global_avg_pool",
] as const;

export type LayerType = (typeof LAYER_TYPES)[number];

export interface LayerNode {
  id: number;
  layer_type: LayerType;
  kernel_size: number;
  stride: number;
  padding: number;
  group: number;
  in_channels: number;
  out_channels: number;
  in_spatial: number;
  out_spatial: number;
}

export interface ArchDocument {
  nodes: LayerNode[];
  edges: [number, number][];
  /** predecessors per node id, sorted */
  preds: number[][];
}

export class BuildError extends Error {}

const WINDOWED = new Set<LayerType>(["conv", "conv_dw", "max_pool", "avg_pool"]);

function intField(obj: Record<string, unknown>, name: string, nodeId: number): number {
  const v = obj[name];
  if (typeof v !== "number" || !Number.isInteger(v) || v < 0) {
    throw new BuildError(`node ${nodeId}: ${name} must be a non-negative integer`);
  }
  return v;
}

/** Parse and sanity-check a document. Throws BuildError with a reason on
 * anything a network cannot be built from; the engine treats that as a
 * status "error" response, not a protocol failure. */
export function parseArchitecture(doc: unknown): ArchDocument {
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new BuildError("architecture must be an object");
  }
  const d = doc as Record<string, unknown>;
  if (d.format !== DOCUMENT_FORMAT) {
    throw new BuildError(`unsupported architecture format ${JSON.stringify(d.format)}`);
  }
  if (!Array.isArray(d.nodes) || d.nodes.length < 1) {
    throw new BuildError("architecture needs a non-empty node list");
  }
  if (!Array.isArray(d.edges)) {
    throw new BuildError("architecture needs an edge list");
  }

  const nodes: LayerNode[] = d.nodes.map((raw, pos) => {
    if (typeof raw !== "object" || raw === null) {
      throw new BuildError(`node ${pos} is not an object`);
    }
    const r = raw as Record<string, unknown>;
    const id = intField(r, "id", pos);
    if (id !== pos) throw new BuildError(`node ids must be 0..n-1 in order (got ${id} at ${pos})`);
    const lt = r.layer_type;
    if (typeof lt !== "string" || !(LAYER_TYPES as readonly string[]).includes(lt)) {
      throw new BuildError(`node ${id}: unknown layer type ${JSON.stringify(lt)}`);
    }
    const node: LayerNode = {
      id,
      layer_type: lt as LayerType,
      kernel_size: intField(r, "kernel_size", id),
      stride: intField(r, "stride", id),
      padding: intField(r, "padding", id),
      group: intField(r, "group", id),
      in_channels: intField(r, "in_channels", id),
      out_channels: intField(r, "out_channels", id),
      in_spatial: intField(r, "in_spatial", id),
      out_spatial: intField(r, "out_spatial", id),
    };
    checkNode(node);
    return node;
  });

  const n = nodes.length;
  const preds: number[][] = Array.from({ length: n }, () => []);
  const outdeg = new Array<number>(n).fill(0);
  const edges: [number, number][] = d.edges.map((e) => {
    if (!Array.isArray(e) || e.length !== 2) throw new BuildError("edges must be [src, dst] pairs");
    const [a, b] = [e[0], e[1]];
    if (!Number.isInteger(a) || !Number.isInteger(b) || a < 0 || b >= n || a >= b) {
      throw new BuildError(`edge [${a}, ${b}] must satisfy 0 <= src < dst < ${n}`);
    }
    const src = nodes[a as number];
    const dst = nodes[b as number];
    if (src.out_channels !== dst.in_channels || src.out_spatial !== dst.in_spatial) {
      throw new BuildError(
        `edge [${a}, ${b}]: output ${src.out_channels}x${src.out_spatial} does not feed ` +
          `input ${dst.in_channels}x${dst.in_spatial}`,
      );
    }
    preds[b as number].push(a as number);
    outdeg[a as number] += 1;
    return [a as number, b as number];
  });

  for (let v = 0; v < n; v++) {
    preds[v].sort((x, y) => x - y);
    if (v === 0 && preds[v].length > 0) throw new BuildError("node 0 must be the only source");
    if (v > 0 && preds[v].length === 0) throw new BuildError(`node ${v} has no inputs`);
    if (v < n - 1 && outdeg[v] === 0) throw new BuildError(`node ${v} feeds nothing`);
  }
  if (nodes[n - 1].out_spatial !== 1) {
    throw new BuildError("final layer must produce spatial size 1 (class logits)");
  }
  return { nodes, edges, preds };
}

function checkNode(nd: LayerNode): void {
  const where = `node ${nd.id} (${nd.layer_type})`;
  if (nd.in_channels < 1 || nd.out_channels < 1) {
    throw new BuildError(`${where}: channel counts must be >= 1`);
  }
  if (nd.in_spatial < 1 || nd.out_spatial < 1) {
    throw new BuildError(`${where}: spatial sizes must be >= 1`);
  }
  if (WINDOWED.has(nd.layer_type)) {
    if (nd.kernel_size < 1 || nd.stride < 1) {
      throw new BuildError(`${where}: needs kernel and stride >= 1`);
    }
    const span = nd.in_spatial + 2 * nd.padding - nd.kernel_size;
    if (span < 0) throw new BuildError(`${where}: window does not fit spatial ${nd.in_spatial}`);
    const want = Math.floor(span / nd.stride) + 1;
    if (nd.out_spatial !== want) {
      throw new BuildError(`${where}: out_spatial ${nd.out_spatial}, expected ${want}`);
    }
  } else if (nd.layer_type === "global_avg_pool") {
    if (nd.out_spatial !== 1) throw new BuildError(`${where}: out_spatial must be 1`);
  } else if (nd.out_spatial !== nd.in_spatial) {
    throw new BuildError(`${where}: spatial size must be preserved`);
  }
  if (nd.layer_type === "conv" || nd.layer_type === "conv_dw") {
    if (nd.group < 1) throw new BuildError(`${where}: group must be >= 1`);
    if (nd.in_channels % nd.group || nd.out_channels % nd.group) {
      throw new BuildError(
        `${where}: group ${nd.group} must divide channels ${nd.in_channels}->${nd.out_channels}`,
      );
    }
    if (nd.layer_type === "conv_dw" && (nd.group !== nd.in_channels || nd.group !== nd.out_channels)) {
      throw new BuildError(`${where}: depthwise needs group == in == out`);
    }
  } else if (nd.layer_type === "fc") {
    if (nd.in_spatial !== 1) throw new BuildError(`${where}: fc expects spatial size 1`);
  } else if (nd.out_channels !== nd.in_channels) {
    throw new BuildError(`${where}: channels must be preserved`);
  }
}

/** Input shape the network expects: [spatial, spatial, channels]. */
export function inputShape(arch: ArchDocument): [number, number, number] {
  const src = arch.nodes[0];
  return [src.in_spatial, src.in_spatial, src.in_channels];
}

/** Number of classes = width of the final layer's output. */
export function numClasses(arch: ArchDocument): number {
  return arch.nodes[arch.nodes.length - 1].out_channels;
}
