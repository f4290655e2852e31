/** Float32 reference forward pass of the shader MLP (for tests/parity). */

import { Layer } from "./manifest.js";

export function mlpForward(layers: Layer[], features: ArrayLike<number>, dir: ArrayLike<number>): Float32Array {
  let h = new Float32Array(layers[0].inDim);
  for (let i = 0; i < 8; i++) h[i] = Math.fround(features[i]);
  for (let i = 0; i < 3; i++) h[8 + i] = Math.fround(dir[i]);

  for (const layer of layers) {
    const out = new Float32Array(layer.outDim);
    for (let j = 0; j < layer.outDim; j++) {
      let acc = layer.bias[j];
      for (let i = 0; i < layer.inDim; i++) {
        acc = Math.fround(acc + Math.fround(h[i] * layer.weights[i][j]));
      }
      if (layer.activation === "relu") {
        out[j] = acc > 0 ? acc : 0;
      } else {
        out[j] = Math.fround(1 / Math.fround(1 + Math.fround(Math.exp(-acc))));
      }
    }
    h = out;
  }
  return h;
}
