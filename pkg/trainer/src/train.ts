/** Training loop and scoring for one evaluation request. */

import * as tf from "@tensorflow/tfjs";
import { ArchDocument } from "./arch";
import { buildNetwork, Network } from "./build";
import { Dataset } from "./dataset";
import { deriveSeed, mulberry32, shuffled } from "./rng";

export interface KdTeacher {
  net: Network;
  temperature: number;
  weight: number;
}

export interface TrainOptions {
  epochs: number;
  seed: number;
  batchSize?: number;
  learningRate?: number;
  kd?: KdTeacher | null;
}

const BATCH = 32;
const EVAL_BATCH = 96;

function crossEntropy(labels: tf.Tensor1D, logits: tf.Tensor2D, classes: number): tf.Scalar {
  const oneHot = tf.oneHot(labels, classes);
  return tf.losses.softmaxCrossEntropy(oneHot, logits) as tf.Scalar;
}

/** Soft-target loss, standard formulation: temperature-scaled softmax on
 * both sides, scaled by T^2 so gradients keep their magnitude. */
function distillLoss(
  teacherLogits: tf.Tensor2D,
  studentLogits: tf.Tensor2D,
  temperature: number,
): tf.Scalar {
  const t = temperature;
  const soft = tf.softmax(tf.div(teacherLogits, t));
  const logProb = tf.logSoftmax(tf.div(studentLogits, t));
  const perSample = tf.neg(tf.sum(tf.mul(soft, logProb), 1));
  return tf.mul(tf.mean(perSample), t * t) as tf.Scalar;
}

export function accuracyOf(net: Network, x: tf.Tensor4D, y: tf.Tensor1D): number {
  const n = x.shape[0];
  let correct = 0;
  for (let start = 0; start < n; start += EVAL_BATCH) {
    const len = Math.min(EVAL_BATCH, n - start);
    correct += tf.tidy(() => {
      const logits = net.forward(tf.slice(x, [start, 0, 0, 0], [len, -1, -1, -1]), false);
      const pred = tf.argMax(logits, 1);
      const hits = tf.equal(pred, tf.slice(y, [start], [len]).cast("int32"));
      return tf.sum(hits.cast("int32")).dataSync()[0];
    });
  }
  return correct / n;
}

/** Train a fresh network on the dataset and return validation accuracy.
 * Deterministic in (arch, dataset, opts.seed): the init, the shuffles, and
 * the data are all seeded, and the cpu backend is reproducible. */
export function trainAndScore(arch: ArchDocument, ds: Dataset, opts: TrainOptions): number {
  const net = buildNetwork(arch, opts.seed);
  try {
    trainInto(net, ds, opts);
    return accuracyOf(net, ds.valX, ds.valY);
  } finally {
    net.dispose();
  }
}

export function trainInto(net: Network, ds: Dataset, opts: TrainOptions): void {
  const lr = opts.learningRate ?? 0.01;
  const batchSize = opts.batchSize ?? BATCH;
  const optimizer = tf.train.adam(lr);
  const shuffleRng = mulberry32(deriveSeed(opts.seed, "shuffle"));
  const n = ds.trainX.shape[0];
  const kd = opts.kd ?? null;
  try {
    for (let epoch = 0; epoch < opts.epochs; epoch++) {
      const order = shuffled(n, shuffleRng);
      for (let start = 0; start < n; start += batchSize) {
        const idx = order.slice(start, start + batchSize);
        tf.tidy(() => {
          const sel = tf.tensor1d(idx, "int32");
          const bx = tf.gather(ds.trainX, sel);
          const by = tf.gather(ds.trainY, sel);
          const teacherLogits = kd ? kd.net.forward(bx, false) : null;
          optimizer.minimize(() => {
            const logits = net.forward(bx, true);
            const hard = crossEntropy(by, logits, ds.classes);
            if (!teacherLogits) return hard;
            const soft = distillLoss(teacherLogits, logits, kd!.temperature);
            return tf.add(
              tf.mul(hard, 1 - kd!.weight),
              tf.mul(soft, kd!.weight),
            ) as tf.Scalar;
          }, false, net.vars);
        });
      }
    }
  } finally {
    optimizer.dispose();
  }
}
