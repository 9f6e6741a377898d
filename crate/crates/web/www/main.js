import init, { kernel, eigenfunctions, convergence, version } from "./pkg/covrecon_web.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// Axes are linear unless log is set; series are {x, y, color, dash, label}.
function plot(canvas, panels) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const w = canvas.width / panels.length;
  panels.forEach((p, i) => drawPanel(ctx, i * w, 0, w, canvas.height, p));
}

function drawPanel(ctx, x0, y0, w, h, { series, log = false, title = "", xlabel = "" }) {
  const pad = { l: 52, r: 12, t: 20, b: 30 };
  const tx = log ? Math.log10 : (v) => v;
  const pts = series.flatMap((s) => s.x.map((x, i) => [tx(x), tx(s.y[i])])).filter(([a, b]) => isFinite(a) && isFinite(b));
  if (pts.length === 0) return;
  let [xmin, xmax] = [Math.min(...pts.map((p) => p[0])), Math.max(...pts.map((p) => p[0]))];
  let [ymin, ymax] = [Math.min(...pts.map((p) => p[1])), Math.max(...pts.map((p) => p[1]))];
  if (ymax === ymin) { ymax += 1; ymin -= 1; }
  const ym = 0.05 * (ymax - ymin);
  ymin -= ym; ymax += ym;
  const X = (v) => x0 + pad.l + ((v - xmin) / (xmax - xmin)) * (w - pad.l - pad.r);
  const Y = (v) => y0 + h - pad.b - ((v - ymin) / (ymax - ymin)) * (h - pad.t - pad.b);

  ctx.strokeStyle = "#999";
  ctx.lineWidth = 1;
  ctx.setLineDash([]);
  ctx.strokeRect(x0 + pad.l, y0 + pad.t, w - pad.l - pad.r, h - pad.t - pad.b);
  ctx.fillStyle = "#444";
  ctx.font = "11px sans-serif";
  const fmt = (v) => (log ? "1e" + v.toFixed(1) : v.toPrecision(3));
  ctx.fillText(fmt(ymax), x0 + 2, Y(ymax) + 4);
  ctx.fillText(fmt(ymin), x0 + 2, Y(ymin));
  ctx.fillText(fmt(xmin), X(xmin), y0 + h - 12);
  ctx.fillText(fmt(xmax), X(xmax) - 30, y0 + h - 12);
  ctx.fillText(title, x0 + pad.l + 4, y0 + 14);
  ctx.fillText(xlabel, x0 + w / 2, y0 + h - 2);

  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 1.6;
    ctx.setLineDash(s.dash || []);
    ctx.beginPath();
    s.x.forEach((x, i) => {
      const px = X(tx(x));
      const py = Y(tx(s.y[i]));
      i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    });
    ctx.stroke();
  }
}

function guard(out, f) {
  try {
    f();
  } catch (e) {
    out.innerHTML = `<span class="err">${e}</span>`;
  }
}

function runKernel() {
  guard($("k-out"), () => {
    const v = JSON.parse(kernel(num("k-n"), num("k-m"), num("k-l"), $("k-est").value, num("k-seed"), num("k-anchor")));
    const lines = [
      ["exact", v.exact, "#000", [4, 3]],
      ["rank-L truncation", v.truncated, COLORS[0], []],
      ["Galerkin", v.discrete, COLORS[2], []],
      ["sampled", v.estimated, COLORS[1], []],
    ];
    plot($("k-plot"), [{ series: lines.map(([label, y, color, dash]) => ({ x: v.grid, y, color, dash, label })), xlabel: "x" }]);
    $("k-legend").innerHTML = lines.map(([l, , c]) => `<span style="color:${c}">&#9632; ${l}</span>`).join("");
    const r = v.report;
    $("k-out").textContent =
      `L=${r.l}  e1=${r.e1.toExponential(3)}  e2=${r.e2.toExponential(3)}  e3=${r.e3.toExponential(3)}  ` +
      `total=${r.total.toExponential(3)}  tau=${v.tau ?? "none"}`;
  });
}

function runEigen() {
  guard($("e-out"), () => {
    const v = JSON.parse(eigenfunctions(num("e-n"), num("e-m"), num("e-l"), num("e-seed")));
    const series = v.modes.flatMap((m, i) => [
      { x: v.grid, y: m.exact, color: COLORS[i % 6], dash: [] },
      { x: v.grid, y: m.discrete, color: COLORS[i % 6], dash: [6, 4] },
      { x: v.grid, y: m.estimated, color: COLORS[i % 6], dash: [2, 3] },
    ]);
    plot($("e-plot"), [{ series, xlabel: "x" }]);
    $("e-out").textContent = v.modes
      .map((m) => `l=${m.index}  exact ${m.lambda_exact.toExponential(5)}  Galerkin ${m.lambda_discrete.toExponential(5)}  sampled ${m.lambda_estimated.toExponential(5)}`)
      .join("\n");
  });
}

function runConvergence() {
  $("c-out").textContent = "running...";
  setTimeout(() =>
    guard($("c-out"), () => {
      const v = JSON.parse(convergence(num("c-reps"), num("c-seed")));
      plot($("c-plot"), [
        { log: true, title: "|lambda_l - lambda_l^h| vs h", xlabel: "h", series: v.eigen_errors.map((y, i) => ({ x: v.h, y, color: COLORS[i] })) },
        { log: true, title: "truncation e1 vs L", xlabel: "L", series: [{ x: v.l, y: v.e1, color: COLORS[0] }] },
        { log: true, title: "mean e3 vs M (n=32, L=3)", xlabel: "M", series: [{ x: v.m, y: v.e3, color: COLORS[1] }] },
      ]);
      $("c-out").textContent =
        `eigenvalue orders in h: ${v.eigen_orders.map((o) => o.toFixed(2)).join(", ")}\n` +
        `e1 slope in L: ${v.e1_slope.toFixed(3)}   e3 slope in M: ${v.e3_slope.toFixed(3)}`;
    }),
  );
}

await init();
$("version").textContent = `covrecon ${version()}`;
$("k-run").onclick = runKernel;
$("e-run").onclick = runEigen;
$("c-run").onclick = runConvergence;
runKernel();
runEigen();
