/**
 * OBJ parsing for baked assets: v / vt / f records plus usemtl page
 * groups. Faces are triangles with `vi/ti` indices; the loader
 * deduplicates (vi, ti) pairs into GL-style vertex streams and keeps
 * one index range per texture page.
 */

export interface ParsedMesh {
  positions: Float32Array; // (n, 3) interleaved
  uvs: Float32Array; // (n, 2)
  indices: Uint32Array;
  /** per page: [start, count] into indices */
  pageRanges: Map<number, [number, number]>;
  triangleCount: number;
}

export class ObjParseError extends Error {}

export function parseObj(text: string): ParsedMesh {
  const rawPos: number[][] = [];
  const rawUv: number[][] = [];
  // faces bucketed per page so each page's triangles are contiguous
  const facesByPage = new Map<number, Array<[number, number]>>();
  let page = 0;

  const lines = text.split("\n");
  for (let ln = 0; ln < lines.length; ln++) {
    const parts = lines[ln].trim().split(/\s+/);
    if (!parts[0] || parts[0] === "#") continue;
    if (parts[0] === "v") {
      rawPos.push([Number(parts[1]), Number(parts[2]), Number(parts[3])]);
    } else if (parts[0] === "vt") {
      rawUv.push([Number(parts[1]), Number(parts[2])]);
    } else if (parts[0] === "usemtl") {
      const m = /^page(\d+)$/.exec(parts[1] ?? "");
      if (!m) throw new ObjParseError(`line ${ln + 1}: unsupported material ${parts[1]}`);
      page = Number(m[1]);
    } else if (parts[0] === "f") {
      if (parts.length !== 4) {
        throw new ObjParseError(`line ${ln + 1}: only triangles are supported`);
      }
      const corners: Array<[number, number]> = [];
      for (const token of parts.slice(1)) {
        const m = /^(-?\d+)\/(-?\d+)(?:\/-?\d+)?$/.exec(token);
        if (!m) throw new ObjParseError(`line ${ln + 1}: bad face token ${token}`);
        corners.push([Number(m[1]) - 1, Number(m[2]) - 1]);
      }
      let bucket = facesByPage.get(page);
      if (!bucket) {
        bucket = [];
        facesByPage.set(page, bucket);
      }
      bucket.push(...corners);
    }
  }

  const key2slot = new Map<number, number>();
  const positions: number[] = [];
  const uvs: number[] = [];
  const indices: number[] = [];
  const pageRanges = new Map<number, [number, number]>();
  for (const [pg, corners] of [...facesByPage.entries()].sort((a, b) => a[0] - b[0])) {
    const start = indices.length;
    for (const [vi, ti] of corners) {
      if (vi < 0 || vi >= rawPos.length || ti < 0 || ti >= rawUv.length) {
        throw new ObjParseError(`face index out of range (v ${vi + 1}/${rawPos.length}, vt ${ti + 1}/${rawUv.length})`);
      }
      const key = vi * rawUv.length + ti;
      let slot = key2slot.get(key);
      if (slot === undefined) {
        slot = positions.length / 3;
        key2slot.set(key, slot);
        positions.push(...rawPos[vi]);
        uvs.push(...rawUv[ti]);
      }
      indices.push(slot);
    }
    pageRanges.set(pg, [start, indices.length - start]);
  }

  return {
    positions: Float32Array.from(positions),
    uvs: Float32Array.from(uvs),
    indices: Uint32Array.from(indices),
    pageRanges,
    triangleCount: indices.length / 3,
  };
}
