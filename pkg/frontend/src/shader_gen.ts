/**
 * GLSL generation with the shader-MLP weights injected as in-source
 * constants (no weight textures, no texel fetches for weights) and all
 * arithmetic grouped into mat4/vec4 operations.
 *
 * Generation is a pure function of (manifest, mode): identical inputs
 * produce byte-identical source.
 */

import { Layer, Manifest } from "./manifest.js";

export type RenderMode = "deferred" | "forward";

/** GLSL float literal that round-trips the exact float32 value. */
export function glslFloat(x: number): string {
  if (!Number.isFinite(x)) throw new Error(`non-finite weight ${x}`);
  const s = String(Math.fround(x));
  return /[.e]/.test(s) ? s : s + ".0";
}

function vec4Lit(v: number[]): string {
  return `vec4(${v.map(glslFloat).join(", ")})`;
}

/** mat4 literal whose column c holds weights W[4k+c][4g..4g+3]. */
function mat4Lit(layer: Layer, inBlock: number, outBlock: number): string {
  const cols: string[] = [];
  for (let c = 0; c < 4; c++) {
    const i = 4 * inBlock + c;
    const col = [0, 1, 2, 3].map((r) => {
      const j = 4 * outBlock + r;
      return i < layer.inDim && j < layer.outDim ? layer.weights[i][j] : 0;
    });
    cols.push(vec4Lit(col));
  }
  return `mat4(${cols.join(", ")})`;
}

function biasLit(layer: Layer, outBlock: number): string {
  const v = [0, 1, 2, 3].map((r) => {
    const j = 4 * outBlock + r;
    return j < layer.outDim ? layer.bias[j] : 0;
  });
  return vec4Lit(v);
}

/**
 * Emit `vec3 evalMlp(vec4 f0, vec4 f1, vec3 dir)` evaluating the whole
 * network. Inputs are the two 4-channel feature samples plus the view
 * direction; the final layer must have 3 outputs.
 */
export function generateMlpFunction(layers: Layer[]): string {
  if (layers[0].inDim !== 11) throw new Error("expected 11 network inputs (8 features + 3 direction)");
  if (layers[layers.length - 1].outDim !== 3) throw new Error("expected 3 network outputs");
  const lines: string[] = [];
  lines.push("vec3 evalMlp(vec4 f0, vec4 f1, vec3 dir) {");
  lines.push("  vec4 h0_0 = f0;");
  lines.push("  vec4 h0_1 = f1;");
  lines.push("  vec4 h0_2 = vec4(dir, 0.0);");
  let inBlocks = 3;
  layers.forEach((layer, li) => {
    const outBlocks = Math.ceil(layer.outDim / 4);
    for (let g = 0; g < outBlocks; g++) {
      const terms = [biasLit(layer, g)];
      for (let k = 0; k < inBlocks; k++) {
        terms.push(`${mat4Lit(layer, k, g)} * h${li}_${k}`);
      }
      let expr = terms.join("\n      + ");
      if (layer.activation === "relu") {
        expr = `max(${expr}, vec4(0.0))`;
      } else {
        expr = `1.0 / (1.0 + exp(-(${expr})))`;
      }
      lines.push(`  vec4 h${li + 1}_${g} = ${expr};`);
    }
    inBlocks = outBlocks;
  });
  lines.push(`  return h${layers.length}_0.xyz;`);
  lines.push("}");
  return lines.join("\n");
}

const MESH_VERTEX = `#version 300 es
precision highp float;
in vec3 aPosition;
in vec2 aUv;
uniform mat4 uProjView;
out vec2 vUv;
out vec3 vWorldPos;
void main() {
  vUv = aUv;
  vWorldPos = aPosition;
  gl_Position = uProjView * vec4(aPosition, 1.0);
}
`;

const FEATURE_FRAGMENT = `#version 300 es
precision highp float;
in vec2 vUv;
in vec3 vWorldPos;
uniform sampler2D uPage0;
uniform sampler2D uPage1;
layout(location = 0) out vec4 oFeat0;
layout(location = 1) out vec4 oFeat1;
void main() {
  vec4 f0 = texture(uPage0, vUv);
  if (f0.r == 0.0) discard;
  oFeat0 = f0;
  oFeat1 = texture(uPage1, vUv);
}
`;

const SCREEN_VERTEX = `#version 300 es
precision highp float;
const vec2 POS[3] = vec2[3](vec2(-1.0, -1.0), vec2(3.0, -1.0), vec2(-1.0, 3.0));
void main() {
  gl_Position = vec4(POS[gl_VertexID], 0.0, 1.0);
}
`;

function shadingFragment(mlp: string): string {
  return `#version 300 es
precision highp float;
uniform sampler2D uFeat0;
uniform sampler2D uFeat1;
uniform vec2 uViewport;      // output resolution
uniform vec2 uHalfTan;       // tan of half fov, x and y
uniform mat3 uCamRot;        // camera-to-world rotation
uniform vec3 uBackground;
out vec4 oColor;

${mlp}

void main() {
  vec2 uv = gl_FragCoord.xy / uViewport;
  // linear filtering at the block center averages the 2x2 subpixels
  vec4 f0 = texture(uFeat0, uv);
  if (f0.r == 0.0) {
    oColor = vec4(uBackground, 1.0);
    return;
  }
  vec4 f1 = texture(uFeat1, uv);
  vec2 ndc = uv * 2.0 - 1.0;
  vec3 dir = normalize(uCamRot * vec3(ndc * uHalfTan, -1.0));
  oColor = vec4(evalMlp(f0, f1, dir), 1.0);
}
`;
}

function forwardFragment(mlp: string): string {
  return `#version 300 es
precision highp float;
in vec2 vUv;
in vec3 vWorldPos;
uniform sampler2D uPage0;
uniform sampler2D uPage1;
uniform vec3 uCameraPos;
out vec4 oColor;

${mlp}

void main() {
  vec4 f0 = texture(uPage0, vUv);
  if (f0.r == 0.0) discard;
  vec4 f1 = texture(uPage1, vUv);
  vec3 dir = normalize(vWorldPos - uCameraPos);
  oColor = vec4(evalMlp(f0, f1, dir), 1.0);
}
`;
}

export interface GeneratedProgramSources {
  meshVertex: string;
  /** feature-image fragment (deferred) or full shading fragment (forward) */
  meshFragment: string;
  /** fullscreen shading pass; empty strings in forward mode */
  screenVertex: string;
  screenFragment: string;
}

export function generateShaders(manifest: Manifest, mode: RenderMode): GeneratedProgramSources {
  const mlp = generateMlpFunction(manifest.layers);
  if (mode === "forward") {
    return {
      meshVertex: MESH_VERTEX,
      meshFragment: forwardFragment(mlp),
      screenVertex: "",
      screenFragment: "",
    };
  }
  return {
    meshVertex: MESH_VERTEX,
    meshFragment: FEATURE_FRAGMENT,
    screenVertex: SCREEN_VERTEX,
    screenFragment: shadingFragment(mlp),
  };
}
