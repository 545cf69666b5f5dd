// Built with: wasm-pack build crates/web --target web --out-dir www/pkg
import init, { Demo } from "./pkg/mitunet_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function paint(id, rgba, side) {
  const c = $(id);
  c.width = side;
  c.height = side;
  const img = new ImageData(new Uint8ClampedArray(rgba), side, side);
  c.getContext("2d").putImageData(img, 0, 0);
}

function generate() {
  demo?.free();
  demo = new Demo(Number($("seed").value), $("size").value);
  const s = demo.side();
  paint("image", demo.image_rgba(), s);
  paint("label", demo.label_rgba(), s);
  paint("coarse", demo.coarse_rgba(), s);
  $("fraction").value = (100 * demo.wall_fraction()).toFixed(1) + "%";
  refine();
  augment();
}

function refine() {
  const d = Number($("dilate").value), k = Number($("close").value);
  $("dilate-v").value = d;
  $("close-v").value = k;
  paint("refined", demo.refine_rgba(d, k), demo.side());
  $("coarse-iou").value = demo.coarse_iou().toFixed(3);
  $("refined-iou").value = demo.refine_iou(d, k).toFixed(3);
}

function augment() {
  demo.augment(Number($("aug-seed").value), $("force").checked);
  paint("aug-image", demo.augmented_image_rgba(), demo.side());
  paint("aug-label", demo.augmented_label_rgba(), demo.side());
}

await init();
$("generate").onclick = generate;
$("dilate").oninput = refine;
$("close").oninput = refine;
$("augment").onclick = augment;
generate();
