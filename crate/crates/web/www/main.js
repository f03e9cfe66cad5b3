// Built by `wasm-bindgen --target web` into ./pkg (see README).
import init, { rmTrajectories, calibrationTable, DyeEnsemble } from "./pkg/ensemble_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const COLORS = { "rm-gamma-0.5": "#d95f02", "rm-gamma-0.7": "#7570b3", "rm-gamma-0.9": "#e7298a", "rm-linear": "#1b9e77" };
const DISTS = ["gaussian", "uniform", "triangular", "exponential"];

function status(text) {
  $("status").textContent = text;
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      status(`error: ${e}`);
    }
  };
}

function drawTrajectories() {
  const data = JSON.parse(rmTrajectories($("t-dist").value, num("t-alpha"), num("t-n"), num("t-paths"), num("t-seed")));
  const cv = $("t-canvas");
  const ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  const all = data.schedules.flatMap((s) => s.paths.flat());
  // clip the first wild steps so the converged region stays readable
  const sorted = [...all].sort((a, b) => a - b);
  let lo = sorted[Math.floor(0.01 * sorted.length)];
  let hi = sorted[Math.floor(0.99 * sorted.length)];
  lo = Math.min(lo, data.exact);
  hi = Math.max(hi, data.exact);
  const pad = 0.05 * (hi - lo || 1);
  lo -= pad;
  hi += pad;
  const steps = data.steps;
  const logMax = Math.log(steps[steps.length - 1]);
  const x = (n) => 40 + ((cv.width - 50) * Math.log(n)) / logMax;
  const y = (v) => cv.height - 20 - ((cv.height - 30) * (v - lo)) / (hi - lo);
  ctx.strokeStyle = "#000";
  ctx.setLineDash([4, 4]);
  ctx.beginPath();
  ctx.moveTo(x(1), y(data.exact));
  ctx.lineTo(x(steps[steps.length - 1]), y(data.exact));
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.globalAlpha = 0.7;
  for (const s of data.schedules) {
    ctx.strokeStyle = COLORS[s.label] || "#555";
    for (const p of s.paths) {
      ctx.beginPath();
      p.forEach((v, i) => (i ? ctx.lineTo(x(steps[i]), y(v)) : ctx.moveTo(x(steps[i]), y(v))));
      ctx.stroke();
    }
  }
  ctx.globalAlpha = 1;
  ctx.fillStyle = "#333";
  ctx.fillText(hi.toPrecision(3), 2, 12);
  ctx.fillText(lo.toPrecision(3), 2, cv.height - 22);
  ctx.fillText("n (log scale)", cv.width - 80, cv.height - 4);
  $("t-legend").innerHTML =
    data.schedules.map((s) => `<span style="color:${COLORS[s.label]}">${s.label}</span>`).join("") +
    `<span>dashed: exact ${data.exact.toPrecision(4)}</span>`;
}

function runCalibration() {
  const data = JSON.parse(calibrationTable($("c-dist").value, num("c-alpha"), num("c-n"), num("c-rep"), num("c-seed")));
  const f = (v) => (v === null ? "" : v.toPrecision(4));
  const rows = data.rows
    .map(
      (r) =>
        `<tr class="${r.calibrated === false ? "bad" : ""}"><td>${r.estimator}</td><td>${f(r.mean)}</td>` +
        `<td>${f(r.bias)}</td><td>${f(r.std)}</td><td>${f(r.rmse)}</td><td>${f(r.rmse_ratio)}</td>` +
        `<td>${r.calibrated ? "yes" : "no"}</td></tr>`,
    )
    .join("");
  $("c-out").innerHTML =
    `<p>exact quantile ${data.exact.toPrecision(6)}</p><table><tr><th>estimator</th><th>mean</th><th>bias</th>` +
    `<th>std</th><th>rmse</th><th>rmse / empirical</th><th>calibrated</th></tr>${rows}</table>`;
}

let ensemble = null;
let mask = null;

function viridisish(u) {
  // cheap blue-to-yellow ramp
  const r = Math.round(255 * Math.min(1, Math.max(0, 1.6 * u - 0.3)));
  const g = Math.round(255 * Math.min(1, 0.2 + 0.8 * u));
  const b = Math.round(255 * Math.max(0, 0.6 - 0.6 * u));
  return [r, g, b];
}

function drawDye() {
  if (!ensemble || ensemble.members === 0) return;
  const t = num("d-t");
  $("d-tval").textContent = t;
  const v = ensemble.field($("d-stat").value, t);
  const w = ensemble.width;
  const h = ensemble.height;
  let lo = Infinity;
  let hi = -Infinity;
  v.forEach((x, k) => {
    if (!mask[k]) {
      lo = Math.min(lo, x);
      hi = Math.max(hi, x);
    }
  });
  $("d-range").textContent = `range [${lo.toPrecision(3)}, ${hi.toPrecision(3)}] over ${ensemble.members} members`;
  const img = new ImageData(w, h);
  for (let j = 0; j < h; j++) {
    for (let i = 0; i < w; i++) {
      const k = j * w + i;
      // row 0 is the bottom of the channel
      const o = 4 * ((h - 1 - j) * w + i);
      const [r, g, b] = mask[k] ? [60, 60, 60] : viridisish(hi > lo ? (v[k] - lo) / (hi - lo) : 0);
      img.data.set([r, g, b, 255], o);
    }
  }
  const cv = $("d-canvas");
  const off = new OffscreenCanvas(w, h);
  off.getContext("2d").putImageData(img, 0, 0);
  const ctx = cv.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, cv.width, cv.height);
}

function simulate() {
  const n = num("d-n");
  const nt = num("d-nt");
  ensemble = new DyeEnsemble(n, nt, num("d-seed"));
  mask = ensemble.solidMask();
  $("d-t").max = nt - 1;
  $("d-t").value = Math.min(num("d-t"), nt - 1);
  // one member per frame keeps the page responsive and shows convergence
  const step = () => {
    try {
      ensemble.advance(1);
      status(`dye ensemble: ${ensemble.members} / ${n} members`);
      drawDye();
      if (ensemble.members < n) requestAnimationFrame(step);
    } catch (e) {
      status(`error: ${e}`);
    }
  };
  requestAnimationFrame(step);
}

await init();
for (const sel of ["t-dist", "c-dist"]) {
  $(sel).innerHTML = DISTS.map((d) => `<option>${d}</option>`).join("");
}
$("t-dist").value = "exponential";
$("t-run").onclick = guarded(drawTrajectories);
$("c-run").onclick = guarded(runCalibration);
$("d-run").onclick = guarded(simulate);
$("d-stat").onchange = guarded(drawDye);
$("d-t").oninput = guarded(drawDye);
status("ready");
guarded(drawTrajectories)();
