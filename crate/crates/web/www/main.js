import init, { run_demo, sinkhorn_playground, pose_auc } from "./pkg/posematch_web.js";

const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.innerHTML = "";
  const span = document.createElement("span");
  span.className = "err";
  span.textContent = String(e);
  el.appendChild(span);
}

function drawPair(r) {
  const cv = $("pair");
  const gap = 10;
  const ctx = cv.getContext("2d");
  cv.width = 2 * r.width + gap;
  cv.height = r.height;
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.strokeRect(0, 0, r.width, r.height);
  ctx.strokeRect(r.width + gap, 0, r.width, r.height);
  const ox = r.width + gap;
  const activeX = new Set(r.active_x);
  const activeY = new Set(r.active_y);
  const dot = (p, dx, on) => {
    ctx.fillStyle = on ? "#357" : "#ccc";
    ctx.fillRect(p[0] + dx - 1, p[1] - 1, 2, 2);
  };
  r.x.forEach((p, i) => dot(p, 0, activeX.has(i)));
  r.y.forEach((p, j) => dot(p, ox, activeY.has(j)));
  ctx.lineWidth = 0.6;
  for (const m of r.matches) {
    ctx.strokeStyle = m.correct ? "rgba(0,150,0,.45)" : "rgba(220,0,0,.8)";
    ctx.beginPath();
    ctx.moveTo(r.x[m.i][0], r.x[m.i][1]);
    ctx.lineTo(r.y[m.j][0] + ox, r.y[m.j][1]);
    ctx.stroke();
  }
}

function iterTable(r) {
  const rows = r.iterations.map((it) =>
    `<tr><td>${it.t}</td><td>${it.kept_x}</td><td>${it.kept_y}</td><td>${it.n_matches}</td>` +
    `<td>${it.pose_delta_deg == null ? "–" : it.pose_delta_deg.toFixed(3)}</td>` +
    `<td>${it.r.toFixed(3)}</td><td>${it.ms.toFixed(1)}</td><td>${it.stopped ? "stop" : ""}</td></tr>`);
  $("iters").innerHTML =
    "<tr><th>t</th><th>kept X</th><th>kept Y</th><th>matches</th><th>Δpose °</th><th>r</th><th>ms</th><th></th></tr>" +
    rows.join("");
}

function runDemo() {
  const status = $("demo-status");
  try {
    const r = JSON.parse(run_demo($("tier").value, BigInt($("seed").value || 0), $("pooling").value,
      $("early").checked, Number($("twins").value || 0)));
    const fmt = (v) => (v == null ? "no pose" : v.toFixed(2) + "°");
    status.textContent =
      `${r.matches.length} matches (rescued ${r.rescued}), precision ${r.precision.toFixed(3)}, ` +
      `M.S. ${r.matching_score.toFixed(3)}, rotation error ${fmt(r.rot_err)}, translation error ${fmt(r.trans_err)}`;
    drawPair(r);
    iterTable(r);
  } catch (e) {
    fail(status, e);
  }
}

function runSinkhorn() {
  const out = $("sk-out");
  try {
    const r = JSON.parse(sinkhorn_playground($("dist").value, Number($("beta").value), Number($("alpha").value),
      Number($("sk-iters").value), Number($("sk-thr").value)));
    const m = r.expanded.length - 1;
    const n = r.expanded[0].length - 1;
    const matched = new Set(r.matches.map(([i, j]) => `${i},${j}`));
    let html = "<table><tr><th></th>";
    for (let j = 0; j < n; j++) html += `<th>y${j}</th>`;
    html += "<th>dustbin</th></tr>";
    r.expanded.forEach((row, i) => {
      html += `<tr><th>${i < m ? "x" + i : "dustbin"}</th>`;
      row.forEach((v, j) => {
        const hit = matched.has(`${i},${j}`) ? ' style="background:#cfc"' : "";
        html += `<td${hit}>${v.toFixed(3)}</td>`;
      });
      html += "</tr>";
    });
    out.innerHTML = html + "</table>";
  } catch (e) {
    fail(out, e);
  }
}

function runAuc() {
  try {
    const r = JSON.parse(pose_auc($("errors").value));
    $("auc-out").textContent = r.map(([t, a]) => `AUC@${t}°  ${(100 * a).toFixed(2)}%`).join("\n");
  } catch (e) {
    $("auc-out").textContent = String(e);
  }
}

await init();
$("run").addEventListener("click", runDemo);
$("sk-run").addEventListener("click", runSinkhorn);
$("auc-run").addEventListener("click", runAuc);
runDemo();
runSinkhorn();
runAuc();
