/**
 * Synthetic planted-attribute image dataset.
 *
 * Each image is a noisy gray background with one colored patch per
 * attribute, planted inside that attribute's canonical grid region. The
 * patch color encodes the attribute's class, so a classifier must learn
 * color-at-location and a class-activation map should light up the patch.
 * Ground-truth patch boxes are recorded for localization scoring.
 */

import { mkdirSync, readFileSync, writeFileSync } from 'node:fs'
import { join } from 'node:path'
import { makeTensor, readSat, writeSat } from './tensor'

export const ATTRIBUTES: Record<string, string[]> = {
  high_neck: ['ruffle_semi_high', 'turtle', 'none'],
  collar: ['rib', 'puritan', 'none'],
  lapel: ['notched', 'shawl', 'collarless'],
  neckline: ['v', 'square', 'round'],
  sleeves_length: ['sleeveless', 'short', 'long'],
  body_length: ['high_waist', 'regular', 'long'],
  skirt_length: ['short', 'knee', 'midi'],
  trousers_length: ['short', 'mid', 'full'],
  heel_height: ['flat', 'low', 'high'],
  boots_height: ['ankle', 'mid_calf', 'knee'],
  closure: ['lace_up', 'slip_on', 'zipper'],
  toe_style: ['round', 'pointed', 'peep'],
}

export const ATTRIBUTE_NAMES = Object.keys(ATTRIBUTES)

export const IMAGE_SIZE = 36
export const PATCH = 9

export interface DatasetSpec {
  nImages: number
  seed: number
}

export interface ImageLabel {
  classes: Record<string, number>
  bboxes: Record<string, [number, number, number, number]>
}

export interface Dataset {
  imageSize: number
  ids: string[]
  images: Map<string, Float32Array> // H*W*3, values in [0, 1]
  labels: Map<string, ImageLabel>
}

/** Deterministic 32-bit PRNG (mulberry32). */
export function rng(seed: number): () => number {
  let a = seed >>> 0
  return () => {
    a = (a + 0x6d2b79f5) >>> 0
    let t = a
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

function hsvToRgb(h: number, s: number, v: number): [number, number, number] {
  const i = Math.floor(h * 6)
  const f = h * 6 - i
  const p = v * (1 - s)
  const q = v * (1 - f * s)
  const t = v * (1 - (1 - f) * s)
  switch (i % 6) {
    case 0: return [v, t, p]
    case 1: return [q, v, p]
    case 2: return [p, v, t]
    case 3: return [p, q, v]
    case 4: return [t, p, v]
    default: return [v, p, q]
  }
}

/** 36 evenly spaced full-saturation hues; an attribute's classes sit 120
 * degrees apart, and no two (attribute, class) colors are closer than 10
 * degrees, so conv channels can specialize per color without overlap. */
export function classColor(attrIndex: number, classIndex: number): [number, number, number] {
  const hue = (attrIndex + 12 * classIndex) / 36
  return hsvToRgb(hue, 0.9, 0.9)
}

/** Canonical 4x3 grid region for each attribute, as [x0, y0, x1, y1]. */
export function regionBox(attrIndex: number, size = IMAGE_SIZE): [number, number, number, number] {
  const rows = 4
  const cols = 3
  const r = Math.floor(attrIndex / cols)
  const c = attrIndex % cols
  const y0 = Math.floor((r * size) / rows)
  const y1 = Math.floor(((r + 1) * size) / rows) - 1
  const x0 = Math.floor((c * size) / cols)
  const x1 = Math.floor(((c + 1) * size) / cols) - 1
  return [x0, y0, x1, y1]
}

export function generateDataset(spec: DatasetSpec): Dataset {
  const rand = rng(spec.seed)
  const size = IMAGE_SIZE
  const ids: string[] = []
  const images = new Map<string, Float32Array>()
  const labels = new Map<string, ImageLabel>()

  for (let n = 0; n < spec.nImages; n++) {
    const id = `img${String(n).padStart(5, '0')}`
    // exact mid-gray background: centered inputs make off-patch conv
    // activations exactly zero, so activation maps stay patch-local
    const img = new Float32Array(size * size * 3).fill(0.5)
    const classes: Record<string, number> = {}
    const bboxes: Record<string, [number, number, number, number]> = {}
    ATTRIBUTE_NAMES.forEach((name, k) => {
      const cls = Math.floor(rand() * ATTRIBUTES[name].length)
      const [rx0, ry0, rx1, ry1] = regionBox(k, size)
      const maxX = rx1 - PATCH + 1
      const maxY = ry1 - PATCH + 1
      const px = rx0 + Math.floor(rand() * Math.max(1, maxX - rx0 + 1))
      const py = ry0 + Math.floor(rand() * Math.max(1, maxY - ry0 + 1))
      const [cr, cg, cb] = classColor(k, cls)
      for (let y = py; y < py + PATCH; y++) {
        for (let x = px; x < px + PATCH; x++) {
          const base = (y * size + x) * 3
          img[base] = Math.min(1, Math.max(0, cr + 0.03 * (rand() - 0.5)))
          img[base + 1] = Math.min(1, Math.max(0, cg + 0.03 * (rand() - 0.5)))
          img[base + 2] = Math.min(1, Math.max(0, cb + 0.03 * (rand() - 0.5)))
        }
      }
      classes[name] = cls
      bboxes[name] = [px, py, px + PATCH - 1, py + PATCH - 1]
    })
    ids.push(id)
    images.set(id, img)
    labels.set(id, { classes, bboxes })
  }
  return { imageSize: size, ids, images, labels }
}

export function saveDataset(ds: Dataset, dir: string): void {
  mkdirSync(join(dir, 'images'), { recursive: true })
  const labelObj: Record<string, ImageLabel> = {}
  for (const id of ds.ids) {
    writeSat(join(dir, 'images', `${id}.sat`),
      makeTensor([ds.imageSize, ds.imageSize, 3], ds.images.get(id)!))
    labelObj[id] = ds.labels.get(id)!
  }
  writeFileSync(join(dir, 'labels.json'), JSON.stringify({
    image_size: ds.imageSize,
    attributes: ATTRIBUTES,
    images: labelObj,
  }, null, 1))
}

export function loadDataset(dir: string): Dataset {
  const meta = JSON.parse(readFileSync(join(dir, 'labels.json'), 'utf-8'))
  const ids = Object.keys(meta.images).sort()
  const images = new Map<string, Float32Array>()
  const labels = new Map<string, ImageLabel>()
  for (const id of ids) {
    const t = readSat(join(dir, 'images', `${id}.sat`))
    images.set(id, t.data as Float32Array)
    labels.set(id, meta.images[id])
  }
  return { imageSize: meta.image_size, ids, images, labels }
}
