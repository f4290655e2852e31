/** Fetch and assemble a baked-asset directory served over HTTP. */

import { Manifest, parseManifest } from "./manifest.js";
import { ParsedMesh, parseObj } from "./obj.js";
import { DecodedPng, decodePng } from "./png.js";

export interface LoadedAsset {
  manifest: Manifest;
  mesh: ParsedMesh;
  /** per page: [feat0, feat1] images */
  pages: Array<[DecodedPng, DecodedPng]>;
}

export class AssetLoadError extends Error {}

async function fetchBytes(url: string): Promise<Uint8Array> {
  const resp = await fetch(url);
  if (!resp.ok) throw new AssetLoadError(`${url}: HTTP ${resp.status}`);
  return new Uint8Array(await resp.arrayBuffer());
}

export async function loadAsset(baseUrl: string): Promise<LoadedAsset> {
  const base = baseUrl.replace(/\/$/, "");
  let manifest: Manifest;
  try {
    const resp = await fetch(`${base}/mlp.json`);
    if (!resp.ok) throw new AssetLoadError(`${base}/mlp.json: HTTP ${resp.status}`);
    manifest = parseManifest(await resp.json());
  } catch (e) {
    throw new AssetLoadError(`mlp.json: ${(e as Error).message}`);
  }

  let mesh: ParsedMesh;
  try {
    const bytes = await fetchBytes(`${base}/scene.obj`);
    mesh = parseObj(new TextDecoder().decode(bytes));
  } catch (e) {
    throw new AssetLoadError(`scene.obj: ${(e as Error).message}`);
  }

  const pages: Array<[DecodedPng, DecodedPng]> = [];
  for (let p = 0; p < manifest.numPages; p++) {
    const halves: DecodedPng[] = [];
    for (const name of [`feat0_${p}.png`, `feat1_${p}.png`]) {
      try {
        halves.push(await decodePng(await fetchBytes(`${base}/${name}`)));
      } catch (e) {
        throw new AssetLoadError(`${name}: ${(e as Error).message}`);
      }
    }
    const [a, b] = halves;
    if (a.width !== b.width || a.height !== b.height) {
      throw new AssetLoadError(`page ${p}: feature image halves disagree in size`);
    }
    if (a.width > 4096 || a.height > 4096 || (a.width & (a.width - 1)) || (a.height & (a.height - 1))) {
      throw new AssetLoadError(`page ${p}: dimensions must be powers of two at most 4096`);
    }
    pages.push([a, b]);
  }

  for (const pg of mesh.pageRanges.keys()) {
    if (pg >= manifest.numPages) {
      throw new AssetLoadError(`scene.obj references page ${pg} but manifest has ${manifest.numPages}`);
    }
  }
  return { manifest, mesh, pages };
}
