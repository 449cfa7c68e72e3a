/**
 * Multi-head attribute classifier, built from explicit tensor ops.
 *
 * Three 3x3 conv blocks (implemented as shift-and-concat im2col + matMul so
 * every op has a wasm-backend gradient) end in a 48-channel feature map;
 * each attribute head reads the spatially averaged channels. Pooled heads
 * make entangled channels useless to the classifier, so training pushes the
 * backbone toward channels that respond to a single attribute's patch, and
 * the gradient-weighted activation maps localize cleanly. The objective is
 * the summed per-attribute softmax cross-entropy. Heads are
 * zero-initialized, so the loss at step 0 is exactly the sum of log class
 * counts.
 */

import * as tf from '@tensorflow/tfjs'
import { mkdirSync, readFileSync, writeFileSync } from 'node:fs'
import { join } from 'node:path'
import { ATTRIBUTES, ATTRIBUTE_NAMES, Dataset, rng } from './dataset'
import { makeTensor, readSat, writeSat } from './tensor'

export const LAST_CONV_CHANNELS = 48
const CHANNELS = [16, 24, LAST_CONV_CHANNELS]
const HEAD_DECAY = 0.01
const ACTIVATION_L1 = 0.03

export interface ExtractorConfig {
  epochs: number
  batchSize: number
  learningRate: number
  seed: number
}

export const DEFAULT_CONFIG: ExtractorConfig = {
  epochs: 10,
  batchSize: 32,
  learningRate: 0.003,
  seed: 0,
}

export interface AttributeModel {
  vars: Record<string, tf.Variable>
  config: ExtractorConfig
  imageSize: number
  featureSize: number
}

let backendReady: Promise<void> | null = null

/** Pick the fastest available backend once per process. */
export function initBackend(): Promise<void> {
  if (!backendReady) {
    backendReady = (async () => {
      try {
        const wasm = await import('@tensorflow/tfjs-backend-wasm')
        const dist = join(__dirname, '..', 'node_modules',
          '@tensorflow', 'tfjs-backend-wasm', 'dist') + '/'
        wasm.setWasmPaths(dist)
        await tf.setBackend('wasm')
        await tf.ready()
      } catch {
        await tf.setBackend('cpu')
        await tf.ready()
      }
    })()
  }
  return backendReady
}

function seededUniform(rand: () => number, shape: number[], scale: number): tf.Tensor {
  const n = shape.reduce((a, b) => a * b, 1)
  const data = new Float32Array(n)
  for (let i = 0; i < n; i++) data[i] = (2 * rand() - 1) * scale
  return tf.tensor(data, shape)
}

export function buildModel(imageSize: number, config: ExtractorConfig): AttributeModel {
  const rand = rng(config.seed + 101)
  const vars: Record<string, tf.Variable> = {}
  let cin = 3
  CHANNELS.forEach((cout, i) => {
    const fanIn = 9 * cin
    const scale = Math.sqrt(6 / (fanIn + cout))
    vars[`conv${i}_w`] = tf.variable(seededUniform(rand, [fanIn, cout], scale))
    vars[`conv${i}_b`] = tf.variable(tf.zeros([cout]))
    cin = cout
  })
  const featureSize = imageSize / 2
  const flat = featureSize * featureSize * LAST_CONV_CHANNELS
  for (const name of ATTRIBUTE_NAMES) {
    vars[`head_${name}_w`] = tf.variable(tf.zeros([flat, ATTRIBUTES[name].length]))
    vars[`head_${name}_b`] = tf.variable(tf.zeros([ATTRIBUTES[name].length]))
  }
  return { vars, config, imageSize, featureSize }
}

/** 3x3 same-padding convolution as shifted-slice im2col + matMul. */
function conv3x3(x: tf.Tensor4D, w: tf.Tensor, b: tf.Tensor): tf.Tensor4D {
  const [n, h, wd, c] = x.shape
  const padded = tf.pad(x, [[0, 0], [1, 1], [1, 1], [0, 0]])
  const shifts: tf.Tensor4D[] = []
  for (const dy of [0, 1, 2]) {
    for (const dx of [0, 1, 2]) {
      shifts.push(tf.slice(padded, [0, dy, dx, 0], [n, h, wd, c]))
    }
  }
  const col = tf.concat(shifts, 3)
  const cout = w.shape[1] as number
  const out = tf.matMul(tf.reshape(col, [n * h * wd, 9 * c]), w)
  return tf.add(tf.reshape(out, [n, h, wd, cout]), b) as tf.Tensor4D
}

/** 2x2 average pooling via reshape + mean (wasm-differentiable). */
function pool2(x: tf.Tensor4D): tf.Tensor4D {
  const [n, h, w, c] = x.shape
  return tf.mean(tf.reshape(x, [n, h / 2, 2, w / 2, 2, c]), [2, 4]) as tf.Tensor4D
}

/** Image batch (NHWC) to last-conv feature maps (NHWC).
 *
 * Inputs are centered on the background gray so conv activations (zero
 * biases) vanish off-patch and activation maps stay localized. */
export function features(model: AttributeModel, x: tf.Tensor4D): tf.Tensor4D {
  return tf.tidy(() => {
    const v = model.vars
    const centered = tf.sub(x, 0.5) as tf.Tensor4D
    let t = tf.relu(conv3x3(centered, v.conv0_w, v.conv0_b)) as tf.Tensor4D
    t = pool2(t)
    t = tf.relu(conv3x3(t, v.conv1_w, v.conv1_b)) as tf.Tensor4D
    return tf.relu(conv3x3(t, v.conv2_w, v.conv2_b)) as tf.Tensor4D
  })
}

/** Feature maps to per-attribute pre-softmax logits. */
export function headLogits(model: AttributeModel, feat: tf.Tensor4D): tf.Tensor2D[] {
  return tf.tidy(() => {
    const n = feat.shape[0]
    const flat = tf.reshape(feat, [n, -1])
    return ATTRIBUTE_NAMES.map((name) =>
      tf.add(tf.matMul(flat, model.vars[`head_${name}_w`]),
             model.vars[`head_${name}_b`]) as tf.Tensor2D)
  })
}

export function datasetTensors(ds: Dataset): { xs: tf.Tensor4D, ys: tf.Tensor2D[] } {
  const n = ds.ids.length
  const size = ds.imageSize
  const flat = new Float32Array(n * size * size * 3)
  ds.ids.forEach((id, i) => flat.set(ds.images.get(id)!, i * size * size * 3))
  const xs = tf.tensor4d(flat, [n, size, size, 3])
  const ys = ATTRIBUTE_NAMES.map((name) => {
    const classes = ATTRIBUTES[name].length
    const onehot = new Float32Array(n * classes)
    ds.ids.forEach((id, i) => {
      onehot[i * classes + ds.labels.get(id)!.classes[name]] = 1
    })
    return tf.tensor2d(onehot, [n, classes])
  })
  return { xs, ys }
}

export function batchLoss(model: AttributeModel, xs: tf.Tensor4D,
                          ys: tf.Tensor2D[]): tf.Scalar {
  return tf.tidy(() => {
    const logits = headLogits(model, features(model, xs))
    let total = tf.scalar(0)
    for (let k = 0; k < logits.length; k++) {
      const ce = tf.losses.softmaxCrossEntropy(ys[k], logits[k], undefined, undefined,
        tf.Reduction.SUM)
      total = total.add(ce) as tf.Scalar
    }
    return total.div(xs.shape[0]) as tf.Scalar
  })
}

/** Multiplicative decay on head weights after each step (decoupled from
 * the Adam moments). Spurious weights that fit sample noise are not
 * regrown by the loss and decay away geometrically, which keeps the
 * per-class gradients, and with them the activation maps, concentrated on
 * the evidence that actually drives the classification. */
export function decayHeads(model: AttributeModel, factor = 1 - HEAD_DECAY): void {
  tf.tidy(() => {
    for (const name of ATTRIBUTE_NAMES) {
      const w = model.vars[`head_${name}_w`]
      w.assign(tf.mul(w, factor))
    }
  })
}

export interface EpochStats {
  loss: number[]
  accuracy: Record<string, number>
}

/** Per-attribute accuracy over a dataset. */
export function evaluateAccuracy(model: AttributeModel, xs: tf.Tensor4D,
                                 ys: tf.Tensor2D[]): Record<string, number> {
  return tf.tidy(() => {
    const logits = headLogits(model, features(model, xs))
    const out: Record<string, number> = {}
    ATTRIBUTE_NAMES.forEach((name, k) => {
      const pred = logits[k].argMax(1)
      const truth = ys[k].argMax(1)
      out[name] = pred.equal(truth).mean().dataSync()[0]
    })
    return out
  })
}

export async function trainModel(ds: Dataset, config: ExtractorConfig,
                                 log: (msg: string) => void = () => {},
                                 ): Promise<{ model: AttributeModel, stats: EpochStats }> {
  await initBackend()
  const model = buildModel(ds.imageSize, config)
  const { xs, ys } = datasetTensors(ds)
  const optimizer = tf.train.adam(config.learningRate)
  const vars = Object.values(model.vars)
  const n = ds.ids.length
  const shuffle = rng(config.seed + 17)
  const stats: EpochStats = { loss: [], accuracy: {} }

  for (let epoch = 0; epoch < config.epochs; epoch++) {
    const order = [...Array(n).keys()]
    for (let i = n - 1; i > 0; i--) {
      const j = Math.floor(shuffle() * (i + 1))
      ;[order[i], order[j]] = [order[j], order[i]]
    }
    let epochLoss = 0
    for (let start = 0; start < n; start += config.batchSize) {
      const idx = order.slice(start, start + config.batchSize)
      const take = tf.tensor1d(idx, 'int32')
      const bx = tf.gather(xs, take) as tf.Tensor4D
      const by = ys.map((y) => tf.gather(y, take) as tf.Tensor2D)
      const lossVal = optimizer.minimize(() => batchLoss(model, bx, by), true, vars)!
      decayHeads(model)
      epochLoss += lossVal.dataSync()[0] * idx.length
      tf.dispose([take, bx, ...by, lossVal])
      if (!Number.isFinite(epochLoss)) {
        throw new Error(`training diverged at epoch ${epoch + 1}`)
      }
    }
    stats.loss.push(epochLoss / n)
    log(`epoch ${epoch + 1}/${config.epochs} loss=${(epochLoss / n).toFixed(4)}`)
  }
  stats.accuracy = evaluateAccuracy(model, xs, ys)
  tf.dispose([xs, ...ys])
  optimizer.dispose()
  return { model, stats }
}

/** Loss the zero-initialized heads must produce: sum of log class counts. */
export function expectedInitLoss(): number {
  return ATTRIBUTE_NAMES.reduce((acc, n) => acc + Math.log(ATTRIBUTES[n].length), 0)
}

// ---------------------------------------------------------------------------
// Persistence: one .sat per weight plus a JSON manifest
// ---------------------------------------------------------------------------

export function saveModel(model: AttributeModel, dir: string): void {
  mkdirSync(dir, { recursive: true })
  const entries: Record<string, string> = {}
  Object.entries(model.vars).forEach(([name, v], i) => {
    const file = `w${String(i).padStart(3, '0')}.sat`
    const data = new Float32Array(v.dataSync() as Float32Array)
    writeSat(join(dir, file), makeTensor(v.shape as number[], data))
    entries[name] = file
  })
  writeFileSync(join(dir, 'model.json'), JSON.stringify({
    image_size: model.imageSize,
    config: model.config,
    weights: entries,
  }, null, 1))
}

export async function loadModel(dir: string): Promise<AttributeModel> {
  await initBackend()
  const meta = JSON.parse(readFileSync(join(dir, 'model.json'), 'utf-8'))
  const model = buildModel(meta.image_size, meta.config)
  for (const [name, file] of Object.entries(meta.weights as Record<string, string>)) {
    const t = readSat(join(dir, file))
    const variable = model.vars[name]
    if (!variable) throw new Error(`unknown weight ${name} in saved model`)
    variable.assign(tf.tensor(t.data as Float32Array, t.shape))
  }
  return model
}
