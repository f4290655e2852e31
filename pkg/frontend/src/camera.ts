/** Orbit/dolly camera and the small matrix kit the renderer needs. */

export interface CameraState {
  theta: number;
  phi: number;
  radius: number;
  target: [number, number, number];
  fovX: number; // radians, horizontal
}

export function defaultCamera(): CameraState {
  return { theta: 0.6, phi: 0.35, radius: 2.2, target: [0, 0, 0], fovX: 0.55 };
}

export function cameraEye(c: CameraState): [number, number, number] {
  const cp = Math.cos(c.phi);
  return [
    c.target[0] + c.radius * Math.cos(c.theta) * cp,
    c.target[1] + c.radius * Math.sin(c.phi),
    c.target[2] + c.radius * Math.sin(c.theta) * cp,
  ];
}

/** Column-major camera-to-world rotation (x right, y up, looks down -z). */
export function cameraRotation(c: CameraState): Float32Array {
  const eye = cameraEye(c);
  const z = norm3([eye[0] - c.target[0], eye[1] - c.target[1], eye[2] - c.target[2]]);
  const x = norm3(cross3([0, 1, 0], z));
  const y = cross3(z, x);
  return new Float32Array([x[0], x[1], x[2], y[0], y[1], y[2], z[0], z[1], z[2]]);
}

/** Column-major proj*view matrix for gl_Position. */
export function projViewMatrix(c: CameraState, width: number, height: number, near = 0.01, far = 100): Float32Array {
  const eye = cameraEye(c);
  const r = cameraRotation(c);
  const x = [r[0], r[1], r[2]];
  const y = [r[3], r[4], r[5]];
  const z = [r[6], r[7], r[8]];
  // view = inverse of [R | eye]
  const view = [
    x[0], y[0], z[0], 0,
    x[1], y[1], z[1], 0,
    x[2], y[2], z[2], 0,
    -dot3(x, eye), -dot3(y, eye), -dot3(z, eye), 1,
  ];
  const tanX = Math.tan(0.5 * c.fovX);
  const tanY = (tanX * height) / width;
  const proj = [
    1 / tanX, 0, 0, 0,
    0, 1 / tanY, 0, 0,
    0, 0, (far + near) / (near - far), -1,
    0, 0, (2 * far * near) / (near - far), 0,
  ];
  return mul4(proj, view);
}

export function halfTan(c: CameraState, width: number, height: number): [number, number] {
  const tanX = Math.tan(0.5 * c.fovX);
  return [tanX, (tanX * height) / width];
}

function mul4(a: number[], b: number[]): Float32Array {
  const out = new Float32Array(16);
  for (let col = 0; col < 4; col++) {
    for (let row = 0; row < 4; row++) {
      let acc = 0;
      for (let k = 0; k < 4; k++) acc += a[k * 4 + row] * b[col * 4 + k];
      out[col * 4 + row] = acc;
    }
  }
  return out;
}

function cross3(a: number[], b: number[]): number[] {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function dot3(a: number[], b: ArrayLike<number>): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

function norm3(a: number[]): number[] {
  const n = Math.hypot(a[0], a[1], a[2]);
  return [a[0] / n, a[1] / n, a[2] / n];
}

/** Wire pointer/wheel events to orbit (drag) and dolly (wheel). */
export function attachControls(canvas: HTMLCanvasElement, cam: CameraState, onChange: () => void) {
  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (e) => {
    dragging = true;
    lastX = e.clientX;
    lastY = e.clientY;
    canvas.setPointerCapture(e.pointerId);
  });
  canvas.addEventListener("pointerup", () => {
    dragging = false;
  });
  canvas.addEventListener("pointermove", (e) => {
    if (!dragging) return;
    cam.theta += (e.clientX - lastX) * 0.008;
    cam.phi = Math.min(1.45, Math.max(-1.45, cam.phi + (e.clientY - lastY) * 0.008));
    lastX = e.clientX;
    lastY = e.clientY;
    onChange();
  });
  canvas.addEventListener(
    "wheel",
    (e) => {
      e.preventDefault();
      cam.radius = Math.min(40, Math.max(0.2, cam.radius * Math.exp(e.deltaY * 0.001)));
      onChange();
    },
    { passive: false },
  );
}
