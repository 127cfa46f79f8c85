import init, { featureMap, trainDemo, layoutView } from "./pkg/dicoop_web.js";

const PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function fail(target, err) {
  target.innerHTML = `<span class="err">${err.message ?? err}</span>`;
}

function drawMap() {
  const stats = $("map-stats");
  let map;
  try {
    map = JSON.parse(featureMap(num("map-alpha"), num("map-sigma"), num("map-seed")));
  } catch (e) {
    return fail(stats, e);
  }
  const byDomain = $("map-color").value === "domain";
  const canvas = $("map-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const xs = map.points.map((p) => p.x), ys = map.points.map((p) => p.y);
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  const pad = 20;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (canvas.width - 2 * pad - 110);
  const sy = (y) => canvas.height - pad - ((y - y0) / (y1 - y0 || 1)) * (canvas.height - 2 * pad);
  for (const p of map.points) {
    ctx.fillStyle = PALETTE[(byDomain ? p.domain_id : p.class_id) % PALETTE.length];
    ctx.beginPath();
    ctx.arc(sx(p.x), sy(p.y), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  const names = byDomain ? map.domains : map.classes;
  names.forEach((name, i) => {
    ctx.fillStyle = PALETTE[i % PALETTE.length];
    ctx.fillRect(canvas.width - 100, 20 + 18 * i, 10, 10);
    ctx.fillStyle = "#222";
    ctx.fillText(name, canvas.width - 85, 29 + 18 * i);
  });
  stats.textContent =
    `${map.points.length} records, 2 axes explain ${(100 * map.explained).toFixed(1)}% of variance\n` +
    `nearest-centroid domain probe: ${(100 * map.centroid_probe).toFixed(1)}% (chance ${(100 / map.domains.length).toFixed(1)}%)`;
}

function plotCurves(canvas, series) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const all = series.flatMap((s) => s.values);
  const lo = Math.min(...all), hi = Math.max(...all);
  const n = Math.max(...series.map((s) => s.values.length));
  const pad = 30;
  const sx = (i) => pad + (i / Math.max(n - 1, 1)) * (canvas.width - 2 * pad);
  const sy = (v) => canvas.height - pad - ((v - lo) / (hi - lo || 1)) * (canvas.height - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, canvas.width - 2 * pad, canvas.height - 2 * pad);
  ctx.fillStyle = "#222";
  ctx.fillText(hi.toFixed(2), 2, pad + 4);
  ctx.fillText(lo.toFixed(2), 2, canvas.height - pad);
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(sx(i), sy(v)) : ctx.moveTo(sx(i), sy(v))));
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, pad + 8, pad + 14 + 14 * k);
  });
}

function runTraining() {
  const stats = $("train-stats");
  stats.textContent = "training...";
  // Let the status line paint before the synchronous run.
  setTimeout(() => {
    const request = {
      layout: $("train-layout").value,
      lambda: num("train-lambda"),
      epochs: num("train-epochs"),
      seed: num("train-seed"),
      holdout: $("train-holdout").value,
    };
    let summary;
    const start = performance.now();
    try {
      summary = JSON.parse(trainDemo(JSON.stringify(request)));
    } catch (e) {
      return fail(stats, e);
    }
    plotCurves($("train-canvas"), [
      { label: "class loss", values: summary.class_loss, color: PALETTE[0] },
      { label: "domain loss", values: summary.domain_loss, color: PALETTE[3] },
    ]);
    stats.textContent =
      `held-out accuracy ${(100 * summary.target_accuracy).toFixed(2)}%   ` +
      `domain probe ${(100 * summary.domain_probe).toFixed(2)}%   ` +
      `(${((performance.now() - start) / 1000).toFixed(1)} s)\n` +
      `per class: ${summary.per_class_accuracy.map((a) => (100 * a).toFixed(0)).join(" ")}` +
      (summary.clamp_events ? `\nclamped probabilities: ${summary.clamp_events}` : "");
  }, 10);
}

function drawLayout() {
  const canvas = $("layout-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let view;
  try {
    view = JSON.parse(layoutView($("layout-kind").value, num("layout-m"), $("layout-ramp").checked, num("layout-lambda")));
  } catch (e) {
    ctx.fillStyle = "#b00";
    ctx.fillText(e.message ?? String(e), 10, 20);
    return;
  }
  const m = view.class_rows.length;
  const w = Math.min(28, 300 / m);
  ctx.fillStyle = "#222";
  ctx.fillText("context rows (trained by)", 10, 14);
  for (let i = 0; i < m; i++) {
    const c = view.class_rows[i], d = view.domain_rows[i];
    ctx.fillStyle = c && d ? "#9467bd" : c ? PALETTE[0] : PALETTE[3];
    ctx.fillRect(10 + i * w, 24, w - 2, 40);
  }
  [["class pass", PALETTE[0]], ["domain pass (reversed)", PALETTE[3]], ["both", "#9467bd"]].forEach(([t, col], k) => {
    ctx.fillStyle = col;
    ctx.fillRect(10 + k * 150, 74, 10, 10);
    ctx.fillStyle = "#222";
    ctx.fillText(t, 25 + k * 150, 83);
  });
  const top = 100, h = canvas.height - top - 20, left = 10, width = canvas.width - 20;
  const lmax = Math.max(...view.lambda_curve.map(([, l]) => l), 1e-9);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(left, top, width, h);
  ctx.strokeStyle = PALETTE[3];
  ctx.beginPath();
  view.lambda_curve.forEach(([p, l], i) => {
    const x = left + p * width, y = top + h - (l / lmax) * h;
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#222";
  ctx.fillText(`lambda over training (max ${lmax.toFixed(2)})`, left + 6, top + 14);
}

await init();
$("map-run").addEventListener("click", drawMap);
$("map-color").addEventListener("change", drawMap);
$("train-run").addEventListener("click", runTraining);
for (const id of ["layout-kind", "layout-m", "layout-lambda", "layout-ramp"]) {
  $(id).addEventListener("input", drawLayout);
}
drawMap();
drawLayout();
