/**
 * WebGL2 renderer for baked assets.
 *
 * Deferred mode (default): pass 1 rasterizes the mesh into a
 * double-resolution pair of RGBA8 feature targets with a z-buffer,
 * discarding fragments whose filtered channel 0 is zero; pass 2 draws a
 * fullscreen triangle whose linear-filtered fetch averages each 2x2
 * block and runs the injected-weight MLP once per output pixel.
 * Forward mode shades fragments directly during mesh rasterization.
 *
 * Vertex/index/texture buffers are uploaded once; nothing is ever
 * sorted per frame (binary opacity keeps z-buffering order-independent).
 */

import { CameraState, cameraEye, cameraRotation, halfTan, projViewMatrix } from "./camera.js";
import { LoadedAsset } from "./assets.js";
import { generateShaders, RenderMode } from "./shader_gen.js";

export class Renderer {
  private gl: WebGL2RenderingContext;
  private asset: LoadedAsset;
  mode: RenderMode;
  private vao!: WebGLVertexArrayObject;
  private pageTex: Array<[WebGLTexture, WebGLTexture]> = [];
  private meshProg!: WebGLProgram;
  private screenProg: WebGLProgram | null = null;
  private fbo: WebGLFramebuffer | null = null;
  private featTex: [WebGLTexture, WebGLTexture] | null = null;
  private depthRb: WebGLRenderbuffer | null = null;
  private fbSize: [number, number] = [0, 0];

  constructor(canvas: HTMLCanvasElement, asset: LoadedAsset, mode: RenderMode = "deferred") {
    const gl = canvas.getContext("webgl2", { antialias: false, preserveDrawingBuffer: false });
    if (!gl) throw new Error("WebGL2 is unavailable");
    this.gl = gl;
    this.asset = asset;
    this.mode = mode;
    this.uploadGeometry();
    this.uploadTextures();
    this.buildPrograms();
  }

  private compile(type: number, src: string): WebGLShader {
    const gl = this.gl;
    const sh = gl.createShader(type)!;
    gl.shaderSource(sh, src);
    gl.compileShader(sh);
    if (!gl.getShaderParameter(sh, gl.COMPILE_STATUS)) {
      throw new Error(`shader compile failed: ${gl.getShaderInfoLog(sh)}`);
    }
    return sh;
  }

  private link(vs: string, fs: string): WebGLProgram {
    const gl = this.gl;
    const prog = gl.createProgram()!;
    gl.attachShader(prog, this.compile(gl.VERTEX_SHADER, vs));
    gl.attachShader(prog, this.compile(gl.FRAGMENT_SHADER, fs));
    gl.bindAttribLocation(prog, 0, "aPosition");
    gl.bindAttribLocation(prog, 1, "aUv");
    gl.linkProgram(prog);
    if (!gl.getProgramParameter(prog, gl.LINK_STATUS)) {
      throw new Error(`program link failed: ${gl.getProgramInfoLog(prog)}`);
    }
    return prog;
  }

  private uploadGeometry() {
    const gl = this.gl;
    const mesh = this.asset.mesh;
    this.vao = gl.createVertexArray()!;
    gl.bindVertexArray(this.vao);
    const pbuf = gl.createBuffer();
    gl.bindBuffer(gl.ARRAY_BUFFER, pbuf);
    gl.bufferData(gl.ARRAY_BUFFER, mesh.positions, gl.STATIC_DRAW);
    gl.enableVertexAttribArray(0);
    gl.vertexAttribPointer(0, 3, gl.FLOAT, false, 0, 0);
    const ubuf = gl.createBuffer();
    gl.bindBuffer(gl.ARRAY_BUFFER, ubuf);
    gl.bufferData(gl.ARRAY_BUFFER, mesh.uvs, gl.STATIC_DRAW);
    gl.enableVertexAttribArray(1);
    gl.vertexAttribPointer(1, 2, gl.FLOAT, false, 0, 0);
    const ibuf = gl.createBuffer();
    gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, ibuf);
    gl.bufferData(gl.ELEMENT_ARRAY_BUFFER, mesh.indices, gl.STATIC_DRAW);
    gl.bindVertexArray(null);
  }

  private uploadTextures() {
    const gl = this.gl;
    for (const [a, b] of this.asset.pages) {
      const pair: WebGLTexture[] = [];
      for (const img of [a, b]) {
        const tex = gl.createTexture()!;
        gl.bindTexture(gl.TEXTURE_2D, tex);
        // rows flipped so GL's bottom-origin t axis matches the OBJ uvs
        const flipped = new Uint8Array(img.width * img.height * 4);
        const src = img.data;
        const ch = img.channels;
        for (let y = 0; y < img.height; y++) {
          const srcRow = (img.height - 1 - y) * img.width * ch;
          for (let x = 0; x < img.width; x++) {
            const d = (y * img.width + x) * 4;
            const s = srcRow + x * ch;
            flipped[d] = src[s];
            flipped[d + 1] = src[s + 1];
            flipped[d + 2] = src[s + 2];
            flipped[d + 3] = ch === 4 ? src[s + 3] : 255;
          }
        }
        gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA8, img.width, img.height, 0, gl.RGBA, gl.UNSIGNED_BYTE, flipped);
        gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.LINEAR);
        gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.LINEAR);
        gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_S, gl.CLAMP_TO_EDGE);
        gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_T, gl.CLAMP_TO_EDGE);
        pair.push(tex);
      }
      this.pageTex.push(pair as [WebGLTexture, WebGLTexture]);
    }
  }

  private buildPrograms() {
    const src = generateShaders(this.asset.manifest, this.mode);
    this.meshProg = this.link(src.meshVertex, src.meshFragment);
    this.screenProg = this.mode === "deferred" ? this.link(src.screenVertex, src.screenFragment) : null;
  }

  setMode(mode: RenderMode) {
    if (mode === this.mode) return;
    this.mode = mode;
    this.buildPrograms();
  }

  private ensureFramebuffer(w2: number, h2: number) {
    const gl = this.gl;
    if (this.fbo && this.fbSize[0] === w2 && this.fbSize[1] === h2) return;
    this.fbo = gl.createFramebuffer();
    this.featTex = [gl.createTexture()!, gl.createTexture()!];
    for (const tex of this.featTex) {
      gl.bindTexture(gl.TEXTURE_2D, tex);
      gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA8, w2, h2, 0, gl.RGBA, gl.UNSIGNED_BYTE, null);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.LINEAR);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.LINEAR);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_S, gl.CLAMP_TO_EDGE);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_T, gl.CLAMP_TO_EDGE);
    }
    this.depthRb = gl.createRenderbuffer();
    gl.bindRenderbuffer(gl.RENDERBUFFER, this.depthRb);
    gl.renderbufferStorage(gl.RENDERBUFFER, gl.DEPTH_COMPONENT24, w2, h2);
    gl.bindFramebuffer(gl.FRAMEBUFFER, this.fbo);
    gl.framebufferTexture2D(gl.FRAMEBUFFER, gl.COLOR_ATTACHMENT0, gl.TEXTURE_2D, this.featTex[0], 0);
    gl.framebufferTexture2D(gl.FRAMEBUFFER, gl.COLOR_ATTACHMENT1, gl.TEXTURE_2D, this.featTex[1], 0);
    gl.framebufferRenderbuffer(gl.FRAMEBUFFER, gl.DEPTH_ATTACHMENT, gl.RENDERBUFFER, this.depthRb);
    gl.drawBuffers([gl.COLOR_ATTACHMENT0, gl.COLOR_ATTACHMENT1]);
    gl.bindFramebuffer(gl.FRAMEBUFFER, null);
    this.fbSize = [w2, h2];
  }

  private drawMesh(cam: CameraState, width: number, height: number) {
    const gl = this.gl;
    gl.useProgram(this.meshProg);
    gl.uniformMatrix4fv(gl.getUniformLocation(this.meshProg, "uProjView"), false, projViewMatrix(cam, width, height));
    const eye = cameraEye(cam);
    const locCam = gl.getUniformLocation(this.meshProg, "uCameraPos");
    if (locCam) gl.uniform3f(locCam, eye[0], eye[1], eye[2]);
    gl.uniform1i(gl.getUniformLocation(this.meshProg, "uPage0"), 0);
    gl.uniform1i(gl.getUniformLocation(this.meshProg, "uPage1"), 1);
    gl.bindVertexArray(this.vao);
    gl.enable(gl.DEPTH_TEST);
    for (const [page, range] of this.asset.mesh.pageRanges) {
      gl.activeTexture(gl.TEXTURE0);
      gl.bindTexture(gl.TEXTURE_2D, this.pageTex[page][0]);
      gl.activeTexture(gl.TEXTURE1);
      gl.bindTexture(gl.TEXTURE_2D, this.pageTex[page][1]);
      gl.drawElements(gl.TRIANGLES, range[1], gl.UNSIGNED_INT, range[0] * 4);
    }
    gl.bindVertexArray(null);
  }

  frame(cam: CameraState) {
    const gl = this.gl;
    const w = gl.canvas.width;
    const h = gl.canvas.height;
    const bg = this.asset.manifest.background;

    if (this.mode === "forward") {
      gl.bindFramebuffer(gl.FRAMEBUFFER, null);
      gl.viewport(0, 0, w, h);
      gl.clearColor(bg[0], bg[1], bg[2], 1.0);
      gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
      this.drawMesh(cam, w, h);
      return;
    }

    this.ensureFramebuffer(w * 2, h * 2);
    gl.bindFramebuffer(gl.FRAMEBUFFER, this.fbo);
    gl.viewport(0, 0, w * 2, h * 2);
    gl.clearColor(0, 0, 0, 0);
    gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
    this.drawMesh(cam, w, h);
    gl.bindFramebuffer(gl.FRAMEBUFFER, null);

    gl.viewport(0, 0, w, h);
    gl.disable(gl.DEPTH_TEST);
    const prog = this.screenProg!;
    gl.useProgram(prog);
    gl.activeTexture(gl.TEXTURE0);
    gl.bindTexture(gl.TEXTURE_2D, this.featTex![0]);
    gl.activeTexture(gl.TEXTURE1);
    gl.bindTexture(gl.TEXTURE_2D, this.featTex![1]);
    gl.uniform1i(gl.getUniformLocation(prog, "uFeat0"), 0);
    gl.uniform1i(gl.getUniformLocation(prog, "uFeat1"), 1);
    gl.uniform2f(gl.getUniformLocation(prog, "uViewport"), w, h);
    const [tx, ty] = halfTan(cam, w, h);
    gl.uniform2f(gl.getUniformLocation(prog, "uHalfTan"), tx, ty);
    gl.uniformMatrix3fv(gl.getUniformLocation(prog, "uCamRot"), false, cameraRotation(cam));
    gl.uniform3f(gl.getUniformLocation(prog, "uBackground"), bg[0], bg[1], bg[2]);
    gl.drawArrays(gl.TRIANGLES, 0, 3);
  }

  /** Render once and read back the presented buffer (RGBA, top row first). */
  screenshot(cam: CameraState): { width: number; height: number; pixels: Uint8Array } {
    const gl = this.gl;
    const w = gl.canvas.width;
    const h = gl.canvas.height;
    this.frame(cam);
    const raw = new Uint8Array(w * h * 4);
    gl.readPixels(0, 0, w, h, gl.RGBA, gl.UNSIGNED_BYTE, raw);
    const flipped = new Uint8Array(w * h * 4);
    for (let y = 0; y < h; y++) {
      flipped.set(raw.subarray((h - 1 - y) * w * 4, (h - y) * w * 4), y * w * 4);
    }
    return { width: w, height: h, pixels: flipped };
  }
}
