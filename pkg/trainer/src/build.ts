/** Turn an architecture document into a trainable tfjs network.
 *
 * The graph is executed node by node in id order (ids are topological): a
 * node's input is the sum of its predecessors' outputs, node 0 reads the
 * data batch. All activations are NHWC. Grouped convolutions are expressed
 * by splitting channels, convolving each slice, and concatenating, since
 * the tfjs op has no group argument; depthwise convolutions map directly
 * onto depthwiseConv2d.
 */

import * as tf from "@tensorflow/tfjs";
import { ArchDocument, BuildError, LayerNode, numClasses } from "./arch";
import { Rng, deriveSeed, gaussian, mulberry32 } from "./rng";

export interface Network {
  /** Batch of images [N, S, S, C] to logits [N, classes]. */
  forward(x: tf.Tensor4D, training: boolean): tf.Tensor2D;
  vars: tf.Variable[];
  paramCount: number;
  dispose(): void;
}

function heTensor(rng: Rng, shape: number[], fanIn: number): tf.Tensor {
  const n = shape.reduce((a, b) => a * b, 1);
  const sd = Math.sqrt(2 / fanIn);
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) data[i] = sd * gaussian(rng);
  return tf.tensor(data, shape);
}

/** tf.variable copies its initializer, so the initializer must go. */
function makeVar(init: tf.Tensor): tf.Variable {
  const v = tf.variable(init);
  init.dispose();
  return v;
}

type NodeOp = (x: tf.Tensor4D, training: boolean) => tf.Tensor4D;

function makeNodeOp(nd: LayerNode, rng: Rng, vars: tf.Variable[]): NodeOp {
  const k = nd.kernel_size;
  switch (nd.layer_type) {
    case "conv": {
      const g = nd.group;
      const filter = makeVar(
        heTensor(rng, [k, k, nd.in_channels / g, nd.out_channels], k * k * (nd.in_channels / g)),
      );
      const bias = makeVar(tf.zeros([nd.out_channels]));
      vars.push(filter, bias);
      return (x) => {
        let y: tf.Tensor4D;
        if (g === 1) {
          y = tf.conv2d(x, filter as tf.Tensor4D, nd.stride, nd.padding, "NHWC", 1, "floor");
        } else {
          const xs = tf.split(x, g, 3);
          const fs = tf.split(filter as tf.Tensor4D, g, 3);
          y = tf.concat(
            xs.map((xi, i) =>
              tf.conv2d(xi as tf.Tensor4D, fs[i] as tf.Tensor4D, nd.stride, nd.padding, "NHWC", 1, "floor"),
            ),
            3,
          );
        }
        return tf.add(y, bias) as tf.Tensor4D;
      };
    }
    case "conv_dw": {
      const filter = makeVar(heTensor(rng, [k, k, nd.in_channels, 1], k * k));
      const bias = makeVar(tf.zeros([nd.out_channels]));
      vars.push(filter, bias);
      return (x) =>
        tf.add(
          tf.depthwiseConv2d(x, filter as tf.Tensor4D, nd.stride, nd.padding, "NHWC", 1, "floor"),
          bias,
        ) as tf.Tensor4D;
    }
    case "batch_norm": {
      const scale = makeVar(tf.ones([nd.out_channels]));
      const offset = makeVar(tf.zeros([nd.out_channels]));
      vars.push(scale, offset);
      // Batch statistics in both modes: the synthetic val split is scored
      // in large batches, so running averages would add state for no
      // observable benefit at this scale.
      return (x) => {
        const { mean, variance } = tf.moments(x, [0, 1, 2]);
        return tf.batchNorm(x, mean, variance, offset, scale, 1e-3) as tf.Tensor4D;
      };
    }
    case "relu":
      return (x) => tf.relu(x);
    case "max_pool":
      return (x) => tf.maxPool(x, k, nd.stride, nd.padding, "floor");
    case "avg_pool":
      return (x) => tf.avgPool(x, k, nd.stride, nd.padding, "floor");
    case "global_avg_pool":
      return (x) => tf.mean(x, [1, 2], true) as tf.Tensor4D;
    case "fc": {
      const w = makeVar(heTensor(rng, [nd.in_channels, nd.out_channels], nd.in_channels));
      const b = makeVar(tf.zeros([nd.out_channels]));
      vars.push(w, b);
      return (x) => {
        const flat = tf.reshape(x, [x.shape[0], nd.in_channels]) as tf.Tensor2D;
        const y = tf.add(tf.matMul(flat, w as tf.Tensor2D), b);
        return tf.reshape(y, [x.shape[0], 1, 1, nd.out_channels]) as tf.Tensor4D;
      };
    }
  }
}

export function buildNetwork(arch: ArchDocument, seed: number): Network {
  const rng = mulberry32(deriveSeed(seed, "init"));
  const vars: tf.Variable[] = [];
  const ops = arch.nodes.map((nd) => makeNodeOp(nd, rng, vars));
  const classes = numClasses(arch);
  const paramCount = vars.reduce((acc, v) => acc + v.size, 0);

  const forward = (x: tf.Tensor4D, training: boolean): tf.Tensor2D => {
    const src = arch.nodes[0];
    if (x.shape[1] !== src.in_spatial || x.shape[3] !== src.in_channels) {
      throw new BuildError(
        `input ${x.shape[1]}x${x.shape[3]}ch does not match the network's ` +
          `${src.in_spatial}x${src.in_channels}ch`,
      );
    }
    const outputs: tf.Tensor4D[] = new Array(arch.nodes.length);
    for (const nd of arch.nodes) {
      const input =
        nd.id === 0
          ? x
          : arch.preds[nd.id].length === 1
            ? outputs[arch.preds[nd.id][0]]
            : tf.addN(arch.preds[nd.id].map((p) => outputs[p]));
      outputs[nd.id] = ops[nd.id](input, training);
    }
    const sink = outputs[arch.nodes.length - 1];
    return tf.reshape(sink, [x.shape[0], classes]);
  };

  return {
    forward,
    vars,
    paramCount,
    dispose() {
      for (const v of vars) v.dispose();
    },
  };
}
