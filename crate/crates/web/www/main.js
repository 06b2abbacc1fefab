import init, { preview_crop, context_window, dmos_report } from "./pkg/contextcrop_web.js";

const $ = (id) => document.getElementById(id);
let sourceImage = null;

function show(el, text, isError) {
  el.textContent = text;
  el.classList.toggle("error", Boolean(isError));
}

function call(out, fn) {
  try {
    return fn();
  } catch (err) {
    show(out, String(err), true);
    return null;
  }
}

function drawBox(ctx, b, color, width) {
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.strokeRect(b[0], b[1], b[2] - b[0], b[3] - b[1]);
}

function runCrop() {
  const width = Number($("crop-width").value);
  const height = Number($("crop-height").value);
  const json = call($("crop-out"), () =>
    preview_crop($("crop-detections").value, width, height, Number($("crop-box").value), Number($("crop-text").value)),
  );
  if (json === null) return;
  const preview = JSON.parse(json);
  show($("crop-out"), JSON.stringify(preview, null, 2), false);

  const src = $("crop-source");
  src.width = width;
  src.height = height;
  const ctx = src.getContext("2d");
  ctx.fillStyle = "#ddd";
  ctx.fillRect(0, 0, width, height);
  if (sourceImage) ctx.drawImage(sourceImage, 0, 0, width, height);
  for (const d of preview.kept) drawBox(ctx, d.box, "#1565c0", 1);

  const out = $("crop-result");
  const b = preview.crop_box ?? [0, 0, width, height];
  if (preview.crop_box) drawBox(ctx, b, "#c62828", 2);
  out.width = b[2] - b[0];
  out.height = b[3] - b[1];
  const octx = out.getContext("2d");
  if (sourceImage) {
    octx.drawImage(sourceImage, b[0], b[1], out.width, out.height, 0, 0, out.width, out.height);
  } else {
    octx.fillStyle = "#ddd";
    octx.fillRect(0, 0, out.width, out.height);
  }
}

function loadImage(file) {
  const url = URL.createObjectURL(file);
  const img = new Image();
  img.onload = () => {
    sourceImage = img;
    $("crop-width").value = img.naturalWidth;
    $("crop-height").value = img.naturalHeight;
    runCrop();
  };
  img.src = url;
}

function runContext() {
  const json = call($("ctx-out"), () =>
    context_window($("ctx-dataset").value, $("ctx-session").value, $("ctx-image").value, Number($("ctx-turns").value)),
  );
  if (json === null) return;
  const w = JSON.parse(json);
  const lines = w.entries.map((e) => `[${e.turn ?? "-"}] ${e.role}: ${e.text}`);
  lines.push("", `turns used: ${w.turns_used}`);
  show($("ctx-out"), lines.join("\n"), false);
}

function runDmos() {
  const json = call($("dmos-out"), () =>
    dmos_report($("dmos-ratings").value, $("dmos-provenance").value, Number($("dmos-cutoff").value), $("dmos-test").value),
  );
  if (json === null) return;
  const outcome = JSON.parse(json);
  if (outcome.status === "incomplete") {
    const lines = outcome.missing.map((m) => `evaluator ${m.evaluator} has not rated ${m.session} #${m.response_index}`);
    show($("dmos-out"), ["Rating grid is incomplete:", ...lines].join("\n"), true);
    return;
  }
  show($("dmos-out"), outcome.table, false);
}

await init();
$("status").textContent = "Ready.";
$("crop-file").addEventListener("change", (e) => e.target.files[0] && loadImage(e.target.files[0]));
$("crop-run").addEventListener("click", runCrop);
$("ctx-run").addEventListener("click", runContext);
$("dmos-run").addEventListener("click", runDmos);
runCrop();
