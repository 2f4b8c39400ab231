/** Built-in synthetic image-classification set.
 *
 * Each class gets a smooth template: a seeded mixture of two-dimensional
 * sinusoids per channel. Samples are the template plus per-pixel Gaussian
 * noise, so the task is easy enough to learn in a couple of epochs yet
 * noisy enough that capacity and training budget matter. Everything is
 * derived from (seed, channels, spatial, classes), so any two processes
 * agree on the data bit for bit and no downloads are involved.
 */

import * as tf from "@tensorflow/tfjs";
import { Rng, deriveSeed, gaussian, mulberry32 } from "./rng";

export interface Dataset {
  trainX: tf.Tensor4D;
  trainY: tf.Tensor1D;
  valX: tf.Tensor4D;
  valY: tf.Tensor1D;
  classes: number;
  dispose(): void;
}

export const TRAIN_PER_CLASS = 48;
export const VAL_PER_CLASS = 24;
const COMPONENTS = 3;
const NOISE_SD = 0.9;

function classTemplate(rng: Rng, spatial: number, channels: number): Float32Array {
  const img = new Float32Array(spatial * spatial * channels);
  for (let c = 0; c < channels; c++) {
    for (let k = 0; k < COMPONENTS; k++) {
      const fx = 1 + Math.floor(rng() * 3);
      const fy = 1 + Math.floor(rng() * 3);
      const phase = rng() * 2 * Math.PI;
      const amp = 0.5 + rng();
      for (let y = 0; y < spatial; y++) {
        for (let x = 0; x < spatial; x++) {
          img[(y * spatial + x) * channels + c] +=
            amp * Math.sin((2 * Math.PI * (fx * x + fy * y)) / spatial + phase);
        }
      }
    }
  }
  // normalize each template to zero mean, unit variance
  let mean = 0;
  for (const v of img) mean += v;
  mean /= img.length;
  let sq = 0;
  for (const v of img) sq += (v - mean) * (v - mean);
  const sd = Math.sqrt(sq / img.length) || 1;
  for (let i = 0; i < img.length; i++) img[i] = (img[i] - mean) / sd;
  return img;
}

function fillSplit(
  rng: Rng,
  templates: Float32Array[],
  perClass: number,
  spatial: number,
  channels: number,
): { x: tf.Tensor4D; y: tf.Tensor1D } {
  const classes = templates.length;
  const n = classes * perClass;
  const size = spatial * spatial * channels;
  const x = new Float32Array(n * size);
  const y = new Int32Array(n);
  // interleave classes so every mini-batch sees a mix without reshuffling
  for (let i = 0; i < n; i++) {
    const cls = i % classes;
    y[i] = cls;
    const base = templates[cls];
    for (let j = 0; j < size; j++) {
      x[i * size + j] = base[j] + NOISE_SD * gaussian(rng);
    }
  }
  return {
    x: tf.tensor4d(x, [n, spatial, spatial, channels]),
    y: tf.tensor1d(y, "int32"),
  };
}

export function makeDataset(
  seed: number,
  channels: number,
  spatial: number,
  classes: number,
): Dataset {
  const templateRng = mulberry32(deriveSeed(seed, `templates/${channels}/${spatial}/${classes}`));
  const templates = Array.from({ length: classes }, () =>
    classTemplate(templateRng, spatial, channels),
  );
  const train = fillSplit(
    mulberry32(deriveSeed(seed, "train-noise")),
    templates,
    TRAIN_PER_CLASS,
    spatial,
    channels,
  );
  const val = fillSplit(
    mulberry32(deriveSeed(seed, "val-noise")),
    templates,
    VAL_PER_CLASS,
    spatial,
    channels,
  );
  return {
    trainX: train.x,
    trainY: train.y,
    valX: val.x,
    valY: val.y,
    classes,
    dispose() {
      train.x.dispose();
      train.y.dispose();
      val.x.dispose();
      val.y.dispose();
    },
  };
}

/** Per-shape cache so repeated requests against the same teacher family
 * reuse one dataset instead of regenerating tensors per request. */
export class DatasetCache {
  private cache = new Map<string, Dataset>();

  constructor(private seed: number) {}

  get(channels: number, spatial: number, classes: number): Dataset {
    const key = `${channels}x${spatial}x${classes}`;
    let ds = this.cache.get(key);
    if (!ds) {
      ds = makeDataset(this.seed, channels, spatial, classes);
      this.cache.set(key, ds);
    }
    return ds;
  }

  dispose(): void {
    for (const ds of this.cache.values()) ds.dispose();
    this.cache.clear();
  }
}
