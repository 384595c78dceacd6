import init, * as sd from "./pkg/sardino_web.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, rgba, width, scale = 1) {
  const height = rgba.length / 4 / width;
  const img = new ImageData(new Uint8ClampedArray(rgba), width, height);
  canvas.width = width;
  canvas.height = height;
  canvas.getContext("2d").putImageData(img, 0, 0);
  canvas.style.width = `${width * scale}px`;
}

function renderTile() {
  try {
    const p = sd.preview_tile(BigInt($("tile-seed").value), +$("tile-index").value, +$("tile-size").value, +$("tile-channel").value);
    const scale = 256 / p.size;
    paint($("tile-sar"), p.sar_rgba(), p.size, scale);
    paint($("tile-labels"), p.labels_rgba(), p.size, scale);
    const counts = p.class_counts();
    const pal = sd.palette();
    $("legend").innerHTML = sd.class_names().map((n, i) =>
      `<span><i style="background:rgb(${pal[3 * i]},${pal[3 * i + 1]},${pal[3 * i + 2]})"></i>${n} ${counts[i]}</span>`).join("");
    p.free();
  } catch (e) {
    $("legend").textContent = e.message;
  }
}

let trainer = null;

function resetTrainer() {
  trainer?.free();
  trainer = new sd.Trainer(BigInt($("dino-seed").value), $("dino-center").checked, +$("dino-lr").value);
  $("dino-log").textContent = `teacher entropy ${trainer.teacher_entropy().toFixed(4)} of max ${trainer.max_entropy.toFixed(4)}\n`;
  showAttention();
}

function showAttention() {
  const px = trainer.attention(+$("dino-tile").value, 4);
  paint($("dino-attn"), px, trainer.strip_width);
}

function trainSteps() {
  const [epoch, loss, ent, tau] = trainer.train(8);
  $("dino-log").textContent += `step ${trainer.steps} epoch ${epoch.toFixed(2)} loss ${loss.toFixed(4)} batch entropy ${ent.toFixed(4)} tau ${tau.toFixed(4)}\n`;
  showAttention();
}

const K = 64;
const base = () => sd.random_logits(K, 3n).map((v) => v * 0.01);

function explore() {
  const epoch = +$("temp-epoch").value;
  const tau = sd.teacher_temperature(epoch);
  const logits = base();
  logits[0] += +$("temp-bias").value;
  const center = new Float32Array(K);
  if ($("temp-center").checked) {
    center[0] = +$("temp-bias").value;
  }
  const out = sd.explore(logits, center, tau);
  const entropy = out[K];
  $("temp-log").textContent = `tau ${tau.toFixed(4)} entropy ${entropy.toFixed(4)} (max ${Math.log(K).toFixed(4)})`;
  const c = $("temp-bars").getContext("2d");
  const w = c.canvas.width / K;
  c.clearRect(0, 0, c.canvas.width, c.canvas.height);
  c.fillStyle = "#36c";
  for (let i = 0; i < K; i++) {
    const h = out[i] * c.canvas.height;
    c.fillRect(i * w, c.canvas.height - h, w - 1, h);
  }
}

await init();
renderTile();
resetTrainer();
explore();
$("tile-go").onclick = renderTile;
$("dino-reset").onclick = resetTrainer;
$("dino-train").onclick = trainSteps;
$("dino-tile").onchange = showAttention;
for (const id of ["temp-epoch", "temp-bias", "temp-center"]) $(id).oninput = explore;
