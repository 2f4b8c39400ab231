import { afterAll, describe, expect, it } from "vitest";
import * as tf from "@tensorflow/tfjs";
import { DatasetCache, makeDataset, TRAIN_PER_CLASS, VAL_PER_CLASS } from "../src/dataset";

describe("makeDataset", () => {
  it("produces the documented shapes and label range", () => {
    const ds = makeDataset(0, 3, 8, 4);
    expect(ds.trainX.shape).toEqual([4 * TRAIN_PER_CLASS, 8, 8, 3]);
    expect(ds.valX.shape).toEqual([4 * VAL_PER_CLASS, 8, 8, 3]);
    const labels = ds.trainY.dataSync();
    for (const l of labels) {
      expect(l).toBeGreaterThanOrEqual(0);
      expect(l).toBeLessThan(4);
    }
    ds.dispose();
  });

  it("balances classes exactly", () => {
    const ds = makeDataset(1, 1, 6, 3);
    const counts = [0, 0, 0];
    for (const l of ds.trainY.dataSync()) counts[l] += 1;
    expect(counts).toEqual([TRAIN_PER_CLASS, TRAIN_PER_CLASS, TRAIN_PER_CLASS]);
    ds.dispose();
  });

  it("is bit-identical across builds with one seed", () => {
    const a = makeDataset(9, 3, 8, 4);
    const b = makeDataset(9, 3, 8, 4);
    expect(a.trainX.dataSync()).toEqual(b.trainX.dataSync());
    expect(a.valX.dataSync()).toEqual(b.valX.dataSync());
    expect(a.trainY.dataSync()).toEqual(b.trainY.dataSync());
    a.dispose();
    b.dispose();
  });

  it("changes with the seed", () => {
    const a = makeDataset(0, 3, 8, 4);
    const b = makeDataset(1, 3, 8, 4);
    const xa = a.trainX.dataSync();
    const xb = b.trainX.dataSync();
    let differs = false;
    for (let i = 0; i < xa.length && !differs; i++) differs = xa[i] !== xb[i];
    expect(differs).toBe(true);
    a.dispose();
    b.dispose();
  });

  it("classes are separated more than noise", () => {
    // mean within-class distance should clearly exceed the template
    // distance to its own class mean, otherwise nothing is learnable
    const ds = makeDataset(2, 3, 8, 4);
    const x = ds.trainX.dataSync();
    const y = ds.trainY.dataSync();
    const size = 8 * 8 * 3;
    const means = Array.from({ length: 4 }, () => new Float64Array(size));
    const counts = [0, 0, 0, 0];
    for (let i = 0; i < y.length; i++) {
      counts[y[i]] += 1;
      for (let j = 0; j < size; j++) means[y[i]][j] += x[i * size + j];
    }
    for (let c = 0; c < 4; c++) for (let j = 0; j < size; j++) means[c][j] /= counts[c];
    let between = 0;
    let pairs = 0;
    for (let a = 0; a < 4; a++) {
      for (let b = a + 1; b < 4; b++) {
        let d = 0;
        for (let j = 0; j < size; j++) d += (means[a][j] - means[b][j]) ** 2;
        between += Math.sqrt(d / size);
        pairs += 1;
      }
    }
    expect(between / pairs).toBeGreaterThan(0.5);
    ds.dispose();
  });
});

describe("DatasetCache", () => {
  const cache = new DatasetCache(4);
  afterAll(() => cache.dispose());

  it("returns the same object per shape and distinct objects across shapes", () => {
    const a = cache.get(3, 8, 4);
    const b = cache.get(3, 8, 4);
    const c = cache.get(3, 8, 8);
    expect(a).toBe(b);
    expect(a).not.toBe(c);
    expect(c.classes).toBe(8);
  });
});

afterAll(() => {
  // tests above dispose what they create; anything left is a leak
  expect(tf.memory().numTensors).toBeLessThan(20);
});
