import init, { cost_table, pkcam_scales, train_curve } from "./pkg/pkcam_web.js";

const $ = (id) => document.getElementById(id);

function call(fn, ...args) {
  const out = JSON.parse(fn(...args));
  if (out.error) throw new Error(out.error);
  return out;
}

function showError(el, e) {
  el.textContent = e.message;
  el.className = "error";
}

function renderCost() {
  const totals = $("cost-totals");
  const table = $("cost-rows");
  try {
    const r = call(cost_table, $("cost-depth").value, $("cost-attention").value,
      $("cost-policy").value, $("cost-convention").value);
    totals.className = "";
    totals.textContent = `params ${r.params.toLocaleString()} (attention ${r.attention_params.toLocaleString()}), ` +
      `FLOPs ${(r.flops / 1e9).toFixed(3)} G`;
    table.innerHTML = "<tr><th>layer</th><th>params</th><th>flops</th></tr>" +
      r.rows.map((x) => `<tr><td>${x.layer}</td><td>${x.params}</td><td>${x.flops}</td></tr>`).join("");
  } catch (e) {
    showError(totals, e);
    table.innerHTML = "";
  }
}

function renderScales() {
  const canvas = $("pk-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let r;
  try {
    r = call(pkcam_scales, Number($("pk-channels").value), Number($("pk-r").value),
      $("pk-interaction").value, $("pk-fusion").value, Number($("pk-seed").value));
  } catch (e) {
    ctx.fillStyle = "#b00";
    ctx.fillText(e.message, 10, 20);
    return;
  }
  const n = r.s.length;
  const mid = canvas.height * 0.6;
  const slot = canvas.width / n;
  const bar = Math.max(1, slot / 3 - 1);
  const range = Math.max(1, ...r.z1.map(Math.abs), ...r.z2.map(Math.abs));
  const half = canvas.height * 0.35;
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(0, mid);
  ctx.lineTo(canvas.width, mid);
  ctx.stroke();
  const series = [[r.z1, "#4a7ebb", range], [r.z2, "#e39b3b", range], [r.s, "#3a9a4a", 1]];
  series.forEach(([values, colour, scale], k) => {
    ctx.fillStyle = colour;
    values.forEach((v, i) => {
      const h = (v / scale) * half;
      ctx.fillRect(i * slot + k * (bar + 1), mid - Math.max(h, 0), bar, Math.abs(h));
    });
  });
  ctx.fillStyle = "#333";
  ctx.fillText(`${r.params} parameters`, 10, 14);
}

function renderCurve() {
  const status = $("tr-status");
  status.className = "";
  status.textContent = "training…";
  setTimeout(() => {
    const canvas = $("tr-canvas");
    const ctx = canvas.getContext("2d");
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    let r;
    try {
      r = call(train_curve, $("tr-attention").value, Number($("tr-epochs").value), 1);
    } catch (e) {
      showError(status, e);
      return;
    }
    const pad = 24;
    const w = canvas.width - 2 * pad;
    const h = canvas.height - 2 * pad;
    const maxLoss = Math.max(...r.loss);
    const x = (i) => pad + (r.top1.length === 1 ? w / 2 : (i * w) / (r.top1.length - 1));
    const line = (values, scale, colour) => {
      ctx.strokeStyle = colour;
      ctx.beginPath();
      values.forEach((v, i) => {
        const y = pad + h - (v / scale) * h;
        i === 0 ? ctx.moveTo(x(i), y) : ctx.lineTo(x(i), y);
      });
      ctx.stroke();
    };
    line(r.top1, 1, "#3a9a4a");
    line(r.loss, maxLoss, "#b04a4a");
    ctx.fillStyle = "#333";
    ctx.fillText("top-1 (green, 0..1), loss (red, 0..max)", pad, 14);
    status.textContent = `final top-1 ${(100 * r.top1[r.top1.length - 1]).toFixed(1)}%`;
  }, 10);
}

await init();
$("status").textContent = "";
for (const id of ["cost-depth", "cost-attention", "cost-policy", "cost-convention"]) {
  $(id).addEventListener("change", renderCost);
}
for (const id of ["pk-channels", "pk-r", "pk-interaction", "pk-fusion", "pk-seed"]) {
  $(id).addEventListener("change", renderScales);
}
$("tr-run").addEventListener("click", renderCurve);
renderCost();
renderScales();
