/**
 * Minimal PNG decoder for the baked texture pages: 8-bit RGB/RGBA,
 * non-interlaced (exactly what the baker writes). Decoding our own
 * bytes sidesteps browser color management and premultiplication, so
 * texel values reach the GPU bit-exact.
 *
 * Inflate comes from DecompressionStream, available in browsers and
 * node >= 18.
 */

export interface DecodedPng {
  width: number;
  height: number;
  channels: 3 | 4;
  /** row-major, top row first */
  data: Uint8Array;
}

export class PngError extends Error {}

const SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

async function inflate(chunks: Uint8Array[]): Promise<Uint8Array> {
  const stream = new Blob(chunks as BlobPart[]).stream().pipeThrough(
    new DecompressionStream("deflate"),
  );
  const out = new Uint8Array(await new Response(stream).arrayBuffer());
  return out;
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

export async function decodePng(bytes: Uint8Array): Promise<DecodedPng> {
  if (bytes.length < 8 || SIGNATURE.some((v, i) => bytes[i] !== v)) {
    throw new PngError("not a PNG file");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  let pos = 8;
  let width = 0;
  let height = 0;
  let channels: 3 | 4 = 4;
  const idat: Uint8Array[] = [];
  while (pos + 8 <= bytes.length) {
    const len = view.getUint32(pos);
    const type = String.fromCharCode(...bytes.subarray(pos + 4, pos + 8));
    const body = bytes.subarray(pos + 8, pos + 8 + len);
    if (type === "IHDR") {
      width = view.getUint32(pos + 8);
      height = view.getUint32(pos + 12);
      const bitDepth = bytes[pos + 16];
      const colorType = bytes[pos + 17];
      const interlace = bytes[pos + 20];
      if (bitDepth !== 8) throw new PngError(`unsupported bit depth ${bitDepth}`);
      if (colorType === 2) channels = 3;
      else if (colorType === 6) channels = 4;
      else throw new PngError(`unsupported color type ${colorType}`);
      if (interlace !== 0) throw new PngError("interlaced PNGs unsupported");
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
    pos += 12 + len;
  }
  if (!width || !height) throw new PngError("missing IHDR");
  const raw = await inflate(idat);

  const stride = width * channels;
  if (raw.length < height * (stride + 1)) throw new PngError("truncated image data");
  const out = new Uint8Array(height * stride);
  let prev = new Uint8Array(stride);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = out.subarray(y * stride, (y + 1) * stride);
    switch (filter) {
      case 0:
        cur.set(row);
        break;
      case 1:
        for (let i = 0; i < stride; i++) {
          cur[i] = (row[i] + (i >= channels ? cur[i - channels] : 0)) & 0xff;
        }
        break;
      case 2:
        for (let i = 0; i < stride; i++) cur[i] = (row[i] + prev[i]) & 0xff;
        break;
      case 3:
        for (let i = 0; i < stride; i++) {
          const left = i >= channels ? cur[i - channels] : 0;
          cur[i] = (row[i] + ((left + prev[i]) >> 1)) & 0xff;
        }
        break;
      case 4:
        for (let i = 0; i < stride; i++) {
          const left = i >= channels ? cur[i - channels] : 0;
          const upLeft = i >= channels ? prev[i - channels] : 0;
          cur[i] = (row[i] + paeth(left, prev[i], upLeft)) & 0xff;
        }
        break;
      default:
        throw new PngError(`unknown row filter ${filter}`);
    }
    prev = cur;
  }
  return { width, height, channels, data: out };
}
