import init, { SiblingDemo, lsrTarget, overfitEpsilon, overfitSoftLabels } from "./pkg/ccl_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (v) => v.toFixed(3);

function heatmap(canvas, values, k) {
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / k;
  for (let i = 0; i < k; i++) {
    for (let j = 0; j < k; j++) {
      const v = values[i * k + j];
      // Square root stretches the small off-diagonal entries.
      const shade = Math.round(255 * (1 - Math.sqrt(v)));
      ctx.fillStyle = `rgb(${shade}, ${shade}, 255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
      if (k <= 10) {
        ctx.fillStyle = v > 0.3 ? "#fff" : "#000";
        ctx.font = `${Math.floor(cell / 4)}px monospace`;
        ctx.fillText(v.toFixed(2), j * cell + 3, i * cell + cell / 2);
      }
    }
  }
}

function matrixText(values, k) {
  const rows = [];
  for (let i = 0; i < k; i++) {
    rows.push(Array.from(values.slice(i * k, (i + 1) * k), fmt).join(" "));
  }
  return rows.join("\n");
}

function showOverfit() {
  const k = Math.max(2, Math.min(30, Math.floor(num("k"))));
  const b = num("b");
  const m = overfitSoftLabels(k, b);
  heatmap($("overfit-map"), m, k);
  $("overfit-info").textContent =
    `diagonal      ${m[0].toFixed(6)}\noff-diagonal  ${m[1].toFixed(6)}\nepsilon       ${overfitEpsilon(k, b).toFixed(6)}`;
}

function showLsr() {
  const counts = [1113, 6705, 514, 327, 1099, 115, 142];
  const total = counts.reduce((a, c) => a + c, 0);
  const prior = $("apriori").checked ? new Float64Array(counts.map((c) => c / total)) : undefined;
  try {
    const t = lsrTarget(Math.floor(num("y")), 7, num("eps"), prior);
    $("lsr-info").textContent = Array.from(t, fmt).join("  ");
  } catch (e) {
    $("lsr-info").textContent = String(e);
  }
}

let running = null;

function train() {
  if (running) {
    running.free();
    running = null;
  }
  let demo;
  try {
    demo = new SiblingDemo(num("seed"), num("dnear"), num("lr"), Math.floor(num("epochs")));
  } catch (e) {
    $("train-info").textContent = String(e);
    return;
  }
  running = demo;
  const tick = () => {
    if (running !== demo) return;
    demo.step();
    const k = demo.classes();
    const m = demo.softLabels();
    heatmap($("train-map"), m, k);
    $("train-info").textContent =
      `epoch ${demo.epoch()}  softness ${fmt(demo.softness())}  frozen ${demo.frozen()}\n` +
      `val accuracy ${fmt(demo.valAccuracy())}\n\n${matrixText(m, k)}`;
    if (!demo.done()) requestAnimationFrame(tick);
  };
  requestAnimationFrame(tick);
}

await init();
$("status").textContent = "";
for (const id of ["k", "b"]) $(id).addEventListener("input", showOverfit);
for (const id of ["y", "eps", "apriori"]) $(id).addEventListener("input", showLsr);
$("train").addEventListener("click", train);
showOverfit();
showLsr();
