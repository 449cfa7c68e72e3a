/**
 * Feature export: per image, the last-conv feature maps, per-attribute
 * gradients of the winning class score w.r.t. those maps, predicted classes
 * with confidences, a pooled global feature, and region-pooled attribute
 * features, all wired into the .sat + manifest.json format the recommender
 * engine loads.
 *
 * The gradient is taken on the pre-softmax score of the argmax class, and
 * attribute features come from the activation-map pipeline: gradient-weighted
 * channel combination -> ReLU -> bilinear upsample to the image frame ->
 * threshold at 20% of max -> largest 4-connected region -> channel-wise max
 * pool over the mapped region.
 */

import * as tf from '@tensorflow/tfjs'
import { mkdirSync, writeFileSync } from 'node:fs'
import { join } from 'node:path'
import { ATTRIBUTES, ATTRIBUTE_NAMES, Dataset } from './dataset'
import { AttributeModel, features, headLogits, initBackend, LAST_CONV_CHANNELS } from './model'
import { makeTensor, writeSat } from './tensor'

export interface ChannelMaps {
  channels: number
  height: number
  width: number
  data: Float32Array // [T, H, W] row-major
}

/** NHWC tensor (batch of one) to [T, H, W] planar layout. */
export function toChannelMaps(t: tf.Tensor4D): ChannelMaps {
  const [, h, w, c] = t.shape
  const nhwc = t.dataSync() as Float32Array
  const out = new Float32Array(c * h * w)
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      for (let ch = 0; ch < c; ch++) {
        out[ch * h * w + y * w + x] = nhwc[(y * w + x) * c + ch]
      }
    }
  }
  return { channels: c, height: h, width: w, data: out }
}

export function gradAam(F: ChannelMaps, G: ChannelMaps): Float32Array {
  const { channels, height, width } = F
  const plane = height * width
  const map = new Float32Array(plane)
  for (let ch = 0; ch < channels; ch++) {
    let alpha = 0
    for (let p = 0; p < plane; p++) alpha += G.data[ch * plane + p]
    alpha /= plane
    for (let p = 0; p < plane; p++) map[p] += alpha * F.data[ch * plane + p]
  }
  for (let p = 0; p < plane; p++) map[p] = Math.max(0, map[p])
  return map
}

/** Align-corners bilinear resize of an H x W grid. */
export function upsampleBilinear(map: Float32Array, h: number, w: number,
                                 outH: number, outW: number): Float32Array {
  const out = new Float32Array(outH * outW)
  for (let oy = 0; oy < outH; oy++) {
    const sy = outH === 1 || h === 1 ? 0 : (oy * (h - 1)) / (outH - 1)
    const y0 = Math.floor(sy)
    const y1 = Math.min(y0 + 1, h - 1)
    const wy = sy - y0
    for (let ox = 0; ox < outW; ox++) {
      const sx = outW === 1 || w === 1 ? 0 : (ox * (w - 1)) / (outW - 1)
      const x0 = Math.floor(sx)
      const x1 = Math.min(x0 + 1, w - 1)
      const wx = sx - x0
      const top = map[y0 * w + x0] * (1 - wx) + map[y0 * w + x1] * wx
      const bot = map[y1 * w + x0] * (1 - wx) + map[y1 * w + x1] * wx
      out[oy * outW + ox] = top * (1 - wy) + bot * wy
    }
  }
  return out
}

/** Largest 4-connected component of (map > 0.2 * max); all-zero maps fall
 * back to the full frame. Returns [x0, y0, x1, y1] inclusive. */
export function largestRegionBox(map: Float32Array, h: number, w: number,
                                 ratio = 0.2): [number, number, number, number] {
  let peak = 0
  for (const v of map) peak = Math.max(peak, v)
  const mask = new Uint8Array(h * w)
  if (peak === 0) {
    mask.fill(1)
  } else {
    for (let p = 0; p < map.length; p++) mask[p] = map[p] > ratio * peak ? 1 : 0
  }
  const seen = new Uint8Array(h * w)
  let best: number[] | null = null
  let bestSize = 0
  for (let start = 0; start < mask.length; start++) {
    if (!mask[start] || seen[start]) continue
    const queue = [start]
    seen[start] = 1
    const pixels: number[] = []
    while (queue.length) {
      const p = queue.pop()!
      pixels.push(p)
      const y = Math.floor(p / w)
      const x = p % w
      for (const [ny, nx] of [[y - 1, x], [y + 1, x], [y, x - 1], [y, x + 1]]) {
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue
        const q = ny * w + nx
        if (mask[q] && !seen[q]) {
          seen[q] = 1
          queue.push(q)
        }
      }
    }
    // scan order guarantees the first equal-sized component wins the tie
    if (pixels.length > bestSize) {
      bestSize = pixels.length
      best = pixels
    }
  }
  let x0 = w, y0 = h, x1 = -1, y1 = -1
  for (const p of best!) {
    const y = Math.floor(p / w)
    const x = p % w
    x0 = Math.min(x0, x); x1 = Math.max(x1, x)
    y0 = Math.min(y0, y); y1 = Math.max(y1, y)
  }
  return [x0, y0, x1, y1]
}

/** Channel-wise max over the image-frame box mapped to map coordinates. */
export function roiMaxPool(F: ChannelMaps, box: [number, number, number, number],
                           imgH: number, imgW: number): Float32Array {
  const { channels, height, width } = F
  const clamp = (v: number, lo: number, hi: number) => Math.min(Math.max(v, lo), hi)
  const x0 = clamp(Math.floor((box[0] * width) / imgW), 0, width - 1)
  const y0 = clamp(Math.floor((box[1] * height) / imgH), 0, height - 1)
  const x1 = clamp(Math.ceil(((box[2] + 1) * width) / imgW) - 1, x0, width - 1)
  const y1 = clamp(Math.ceil(((box[3] + 1) * height) / imgH) - 1, y0, height - 1)
  const out = new Float32Array(channels)
  const plane = height * width
  for (let ch = 0; ch < channels; ch++) {
    let m = -Infinity
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        m = Math.max(m, F.data[ch * plane + y * width + x])
      }
    }
    out[ch] = m
  }
  return out
}

export interface ExportedAttribute {
  F: ChannelMaps
  G: ChannelMaps
  classIndex: number
  confidence: number
  bbox: [number, number, number, number]
  feature: Float32Array
}

export interface ExportedImage {
  global: Float32Array
  attributes: Record<string, ExportedAttribute>
}

export async function exportImage(model: AttributeModel,
                                  image: Float32Array): Promise<ExportedImage> {
  await initBackend()
  const size = model.imageSize
  const input = tf.tensor4d(image, [1, size, size, 3])
  const featT = features(model, input)
  const F = toChannelMaps(featT)
  const logitsT = headLogits(model, featT)

  const globalFeat = tf.tidy(() => featT.mean([1, 2]).squeeze())
  const global = new Float32Array(globalFeat.dataSync() as Float32Array)

  const attributes: Record<string, ExportedAttribute> = {}
  ATTRIBUTE_NAMES.forEach((name, k) => {
    const logits = logitsT[k].dataSync() as Float32Array
    let classIndex = 0
    for (let c = 1; c < logits.length; c++) {
      if (logits[c] > logits[classIndex]) classIndex = c
    }
    const exps = Array.from(logits, (v) => Math.exp(v - logits[classIndex]))
    const confidence = 1 / exps.reduce((a, b) => a + b, 0)

    // d(pre-softmax score of the argmax class) / d(feature map); class
    // selection via a one-hot mask (gather has no wasm gradient kernel)
    const mask = new Float32Array(logits.length)
    mask[classIndex] = 1
    const maskT = tf.tensor2d(mask, [1, logits.length])
    const scoreOfF = (f: tf.Tensor) => {
      const out = headLogits(model, f as tf.Tensor4D)
      return out[k].mul(maskT).sum()
    }
    const gradT = tf.tidy(() => tf.grad(scoreOfF)(featT) as tf.Tensor4D)
    maskT.dispose()
    const G = toChannelMaps(gradT)
    gradT.dispose()

    const aam = gradAam(F, G)
    const up = upsampleBilinear(aam, F.height, F.width, size, size)
    const bbox = largestRegionBox(up, size, size)
    const feature = roiMaxPool(F, bbox, size, size)
    attributes[name] = { F, G, classIndex, confidence, bbox, feature }
  })

  tf.dispose([input, featT, globalFeat, ...logitsT])
  return { global, attributes }
}

/** Export a whole dataset as manifest.json + .sat files. */
export async function exportDataset(model: AttributeModel, ds: Dataset,
                                    outDir: string,
                                    log: (msg: string) => void = () => {}): Promise<void> {
  mkdirSync(outDir, { recursive: true })
  const manifest: Record<string, unknown> = {
    m: LAST_CONV_CHANNELS,
    m_g: LAST_CONV_CHANNELS,
    image_frame: [ds.imageSize, ds.imageSize],
    attribute_names: ATTRIBUTE_NAMES,
    attribute_classes: ATTRIBUTES,
    items: {},
  }
  const items = manifest.items as Record<string, unknown>
  for (let i = 0; i < ds.ids.length; i++) {
    const id = ds.ids[i]
    const exported = await exportImage(model, ds.images.get(id)!)
    const rel = `items/${String(i).padStart(6, '0')}`
    mkdirSync(join(outDir, rel), { recursive: true })
    const attrs: Record<string, string> = {}
    const maps: Record<string, unknown> = {}
    ATTRIBUTE_NAMES.forEach((name, k) => {
      const slug = `a${String(k).padStart(2, '0')}`
      const a = exported.attributes[name]
      writeSat(join(outDir, rel, `${slug}.sat`),
        makeTensor([a.feature.length], a.feature))
      writeSat(join(outDir, rel, `${slug}.F.sat`),
        makeTensor([a.F.channels, a.F.height, a.F.width], a.F.data))
      writeSat(join(outDir, rel, `${slug}.G.sat`),
        makeTensor([a.G.channels, a.G.height, a.G.width], a.G.data))
      attrs[name] = `${rel}/${slug}.sat`
      maps[name] = {
        F: `${rel}/${slug}.F.sat`,
        G: `${rel}/${slug}.G.sat`,
        class: ATTRIBUTES[name][a.classIndex],
        confidence: a.confidence,
        bbox: a.bbox,
      }
    })
    writeSat(join(outDir, rel, 'global.sat'),
      makeTensor([exported.global.length], exported.global))
    items[id] = { attrs, global: `${rel}/global.sat`, maps }
    if ((i + 1) % 25 === 0) log(`exported ${i + 1}/${ds.ids.length} images`)
  }
  writeFileSync(join(outDir, 'manifest.json'), JSON.stringify(manifest, null, 1))
}
