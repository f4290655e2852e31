/** Page bootstrap: load the asset named by ?scene=, wire controls,
 * render on demand, and expose the screenshot hook for harnesses. */

import { loadAsset } from "./assets.js";
import { attachControls, defaultCamera } from "./camera.js";
import { Renderer } from "./renderer.js";
import { RenderMode } from "./shader_gen.js";

declare global {
  interface Window {
    __viewerScreenshot?: () => { width: number; height: number; pixels: Uint8Array };
    __viewerSetMode?: (mode: RenderMode) => void;
  }
}

function showError(message: string) {
  const el = document.getElementById("error")!;
  el.textContent = message;
  el.style.display = "block";
}

async function boot() {
  const params = new URLSearchParams(location.search);
  const scene = params.get("scene") ?? "asset";
  const mode = (params.get("mode") === "forward" ? "forward" : "deferred") as RenderMode;

  const canvas = document.getElementById("view") as HTMLCanvasElement;
  canvas.width = Number(params.get("w") ?? 800);
  canvas.height = Number(params.get("h") ?? 800);

  let asset;
  try {
    asset = await loadAsset(scene);
  } catch (e) {
    showError(String((e as Error).message));
    return;
  }
  const renderer = new Renderer(canvas, asset, mode);
  const cam = defaultCamera();

  const fpsEl = document.getElementById("fps")!;
  let frames = 0;
  let lastReport = performance.now();
  canvas.addEventListener("webglcontextlost", (e) => {
    e.preventDefault();
    showError("GPU context lost; reload the page");
  });

  function loop() {
    renderer.frame(cam);
    frames++;
    const now = performance.now();
    if (now - lastReport > 500) {
      fpsEl.textContent = `${((frames * 1000) / (now - lastReport)).toFixed(1)} fps (${renderer.mode})`;
      frames = 0;
      lastReport = now;
    }
    requestAnimationFrame(loop);
  }
  attachControls(canvas, cam, () => undefined);
  requestAnimationFrame(loop);

  window.__viewerScreenshot = () => renderer.screenshot(cam);
  window.__viewerSetMode = (m) => renderer.setMode(m);
}

boot();
