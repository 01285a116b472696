import init, { Demo, task_legend } from "./pkg/ctask_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const SIZE = 64;

function status(text, error = false) {
  $("status").textContent = text;
  $("status").className = error ? "error" : "";
}

function draw(id, rgba) {
  const c = $(id);
  c.width = SIZE;
  c.height = SIZE;
  const ctx = c.getContext("2d");
  if (rgba.length === 0) {
    ctx.clearRect(0, 0, SIZE, SIZE);
    return;
  }
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), SIZE, SIZE), 0, 0);
}

function attempt(f) {
  try {
    status(f() ?? "");
  } catch (e) {
    status(String(e), true);
  }
}

function cell(event) {
  const r = event.target.getBoundingClientRect();
  return [((event.clientX - r.left) / r.width) * SIZE, ((event.clientY - r.top) / r.height) * SIZE];
}

await init();
const demo = new Demo(Number($("scene-seed").value), SIZE);

function refresh() {
  draw("image", demo.image_rgba());
  draw("palette", demo.palette_rgba());
  draw("target", demo.target_rgba());
  draw("prediction", demo.prediction_rgba());
}

for (const t of JSON.parse(task_legend())) {
  const o = document.createElement("option");
  o.value = o.textContent = t.name;
  $("brush").append(o);
  const s = document.createElement("span");
  s.innerHTML = `<span class="swatch" style="background: rgb(${t.color})"></span>${t.name} `;
  $("legend").append(s);
}

$("new-scene").onclick = () => attempt(() => {
  demo.set_scene(Number($("scene-seed").value));
  demo.set_rule($("rule").value, Number($("rule-seed").value));
  refresh();
});

$("apply-rule").onclick = () => attempt(() => {
  demo.set_rule($("rule").value, Number($("rule-seed").value));
  refresh();
});

let painting = false;
function paint(event) {
  const [x, y] = cell(event);
  attempt(() => demo.paint(x, y, Number($("radius").value), $("brush").value));
  refresh();
}
$("palette").onpointerdown = (e) => { painting = true; paint(e); };
window.onpointerup = () => { painting = false; };

for (const id of ["image", "palette", "target", "prediction"]) {
  $(id).onpointermove = (e) => {
    if (painting && id === "palette") paint(e);
    const [x, y] = cell(e).map(Math.floor);
    if (x >= 0 && y >= 0 && x < SIZE && y < SIZE) {
      const p = JSON.parse(demo.probe(x, y));
      $("probe").textContent = `(${p.x}, ${p.y}) ${p.task}: target ${p.target ?? "unlabelled"}, predicted ${p.predicted ?? "-"}`;
    }
  };
}

$("run").onclick = () => attempt(() => {
  const t = performance.now();
  demo.predict();
  refresh();
  return `forward pass ${(performance.now() - t).toFixed(0)} ms`;
});

$("load").onclick = async () => {
  const [ckpt, sidecar] = [$("ckpt").files[0], $("sidecar").files[0]];
  if (!ckpt || !sidecar) {
    status("choose both the .ctta checkpoint and its .json sidecar", true);
    return;
  }
  const bytes = new Uint8Array(await ckpt.arrayBuffer());
  const text = await sidecar.text();
  attempt(() => {
    demo.load_checkpoint(text, bytes);
    refresh();
  });
};

demo.set_rule($("rule").value, 0);
refresh();
