/**
 * Baked-asset manifest (mlp.json): shader weights plus packing metadata.
 * Weights are narrowed to float32 on load so the injected shader
 * constants match what the GPU computes with.
 */

export const SUPPORTED_FORMAT_VERSION = 1;

export interface Layer {
  /** weights[in][out], float32-narrowed */
  weights: Float32Array[];
  bias: Float32Array;
  activation: "relu" | "sigmoid";
  inDim: number;
  outDim: number;
}

export interface Manifest {
  formatVersion: number;
  patchSize: number;
  resolution: number;
  sceneKind: Record<string, unknown>;
  background: [number, number, number];
  numPages: number;
  layers: Layer[];
}

export class AssetFormatError extends Error {}

export function parseManifest(json: unknown): Manifest {
  const o = json as Record<string, unknown>;
  if (typeof o !== "object" || o === null) {
    throw new AssetFormatError("mlp.json: not an object");
  }
  if (o.format_version !== SUPPORTED_FORMAT_VERSION) {
    throw new AssetFormatError(
      `mlp.json: format_version ${String(o.format_version)} unsupported (want ${SUPPORTED_FORMAT_VERSION})`,
    );
  }
  for (const key of ["K", "P", "scene_kind", "background", "num_pages", "layers"]) {
    if (!(key in o)) throw new AssetFormatError(`mlp.json: missing key ${key}`);
  }
  const rawLayers = o.layers as Array<{
    weights: number[][];
    bias: number[];
    activation: string;
  }>;
  const layers: Layer[] = rawLayers.map((l, i) => {
    if (l.activation !== "relu" && l.activation !== "sigmoid") {
      throw new AssetFormatError(`mlp.json: layer ${i} has unknown activation ${l.activation}`);
    }
    const inDim = l.weights.length;
    const outDim = l.bias.length;
    for (const row of l.weights) {
      if (row.length !== outDim) {
        throw new AssetFormatError(`mlp.json: layer ${i} weight rows are ragged`);
      }
    }
    return {
      weights: l.weights.map((row) => Float32Array.from(row, Math.fround)),
      bias: Float32Array.from(l.bias, Math.fround),
      activation: l.activation,
      inDim,
      outDim,
    };
  });
  for (let i = 1; i < layers.length; i++) {
    if (layers[i].inDim !== layers[i - 1].outDim) {
      throw new AssetFormatError(`mlp.json: layer ${i} input dim mismatch`);
    }
  }
  const bg = o.background as number[];
  return {
    formatVersion: o.format_version as number,
    patchSize: o.K as number,
    resolution: o.P as number,
    sceneKind: o.scene_kind as Record<string, unknown>,
    background: [bg[0] ?? 0, bg[1] ?? 0, bg[2] ?? 0],
    numPages: o.num_pages as number,
    layers,
  };
}
