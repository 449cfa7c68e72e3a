/**
 * Feature-extractor CLI.
 *
 *   gen      --out <dir> --n <count> --seed <n>
 *   train    --dataset <dir> --out <dir> --seed <n> [--epochs E] [--lr X]
 *   extract  --dataset <dir> --out <dir> --seed <n> [--model <dir>]
 *
 * `extract` trains a fresh seeded model when no --model directory is given,
 * then writes the manifest.json + .sat export the recommender engine loads.
 */

import { parseArgs } from 'node:util'
import { generateDataset, loadDataset, saveDataset } from './dataset'
import { DEFAULT_CONFIG, evaluateAccuracy, datasetTensors, loadModel, saveModel, trainModel } from './model'
import { exportDataset } from './extract'
import * as tf from '@tensorflow/tfjs'

function usage(): never {
  console.error('usage: cli <gen|train|extract> [flags]')
  process.exit(1)
}

async function main(): Promise<void> {
  const [command, ...rest] = process.argv.slice(2)
  if (!command) usage()
  const { values } = parseArgs({
    args: rest,
    options: {
      out: { type: 'string' },
      dataset: { type: 'string' },
      model: { type: 'string' },
      n: { type: 'string', default: '600' },
      seed: { type: 'string' },
      epochs: { type: 'string' },
      lr: { type: 'string' },
    },
  })
  if (!values.seed) {
    console.error('error: --seed is required')
    process.exit(1)
  }
  const seed = Number(values.seed)

  if (command === 'gen') {
    if (!values.out) usage()
    const ds = generateDataset({ nImages: Number(values.n), seed })
    saveDataset(ds, values.out)
    console.log(`wrote ${ds.ids.length} images to ${values.out}`)
    return
  }

  if (command === 'train') {
    if (!values.dataset || !values.out) usage()
    const ds = loadDataset(values.dataset)
    const config = {
      ...DEFAULT_CONFIG,
      seed,
      epochs: values.epochs ? Number(values.epochs) : DEFAULT_CONFIG.epochs,
      learningRate: values.lr ? Number(values.lr) : DEFAULT_CONFIG.learningRate,
    }
    const { model, stats } = await trainModel(ds, config, console.log)
    saveModel(model, values.out)
    const acc = Object.entries(stats.accuracy)
    const worst = acc.reduce((a, b) => (a[1] < b[1] ? a : b))
    console.log(`saved model to ${values.out}; worst attribute accuracy ` +
      `${worst[0]}=${(worst[1] * 100).toFixed(1)}%`)
    return
  }

  if (command === 'extract') {
    if (!values.dataset || !values.out) usage()
    const ds = loadDataset(values.dataset)
    let model
    if (values.model) {
      model = await loadModel(values.model)
    } else {
      const config = {
        ...DEFAULT_CONFIG,
        seed,
        epochs: values.epochs ? Number(values.epochs) : DEFAULT_CONFIG.epochs,
      }
      const trained = await trainModel(ds, config, console.log)
      model = trained.model
      const { xs, ys } = datasetTensors(ds)
      const acc = evaluateAccuracy(model, xs, ys)
      tf.dispose([xs, ...ys])
      console.log('train accuracy: ' + Object.entries(acc)
        .map(([k, v]) => `${k}=${(v * 100).toFixed(0)}%`).join(' '))
    }
    await exportDataset(model, ds, values.out, console.log)
    console.log(`exported ${ds.ids.length} items to ${values.out}`)
    return
  }

  usage()
}

main().catch((err) => {
  console.error(`error: ${err.message}`)
  process.exit(2)
})
