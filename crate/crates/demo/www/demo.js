// Thin renderer over the wasm exports. Build the module first:
//   cargo build -p emuscan-demo --target wasm32-unknown-unknown --release
//   wasm-bindgen --target web --out-dir crates/demo/www/pkg \
//       target/wasm32-unknown-unknown/release/emuscan_demo.wasm
// then serve crates/demo/www with any static file server.

import init, { demo_generate, demo_scan, demo_trace } from "./pkg/emuscan_demo.js";

const $ = (id) => document.getElementById(id);
const state = { offsets: [] };

function scanParams() {
  return [
    $("hexbox").value,
    $("profile").value,
    Number($("threshold").value) || 8,
    Number($("budget").value) || 8192,
    $("syscalls").checked,
  ];
}

function setError(msg) {
  $("error").textContent = msg || "";
}

function generate() {
  setError("");
  const out = JSON.parse(demo_generate(
    $("variant").value,
    Number($("seed").value) || 0,
    Number($("plen").value) || 64,
    Number($("junk").value) || 0,
  ));
  if (!out.ok) return setError(out.error);
  $("hexbox").value = out.hex;
  $("meta").textContent =
    `${out.variant} seed=${out.seed}: ${out.length} bytes, ` +
    `payload ${out.payload_len}B @ offset ${out.payload_offset}, key 0x${out.key.toString(16)}\n` +
    `ground truth: baseline=${out.expected_baseline}, extended=${out.expected_extended}`;
  scan();
}

function scan() {
  setError("");
  const out = JSON.parse(demo_scan(...scanParams()));
  if (!out.ok) return setError(out.error);

  const v = $("verdict");
  v.className = out.verdict;
  v.textContent = out.verdict === "shellcode"
    ? `SHELLCODE — convicting chain at offset ${out.offset}`
    : "benign — no GetPC-then-payload-reads chain";
  $("evidence").textContent = out.evidence
    ? `evidence: ${out.evidence.kind} at ${out.evidence.at}, recovered ${out.evidence.recovered}, ` +
      `${out.evidence.distinct_reads} distinct payload reads, chain ended ${out.evidence.termination}`
    : "";

  state.offsets = out.offsets;
  const map = $("heatmap");
  map.replaceChildren();
  for (const row of out.offsets) {
    const cell = document.createElement("div");
    cell.className = `cell ${row.termination}` +
      (row.getpc > 0 ? " getpc" : "") + (row.convicted ? " convicted" : "");
    cell.title = `offset ${row.offset}: ${row.termination}, retired ${row.retired}, ` +
      `getpc ${row.getpc}, distinct reads ${row.reads}`;
    cell.addEventListener("click", () => trace(row.offset));
    map.appendChild(cell);
  }
}

function trace(offset) {
  setError("");
  const [hex, , , budget, syscalls] = scanParams();
  const out = JSON.parse(demo_trace(hex, offset, budget, syscalls));
  if (!out.ok) return setError(out.error);
  $("tracetitle").textContent = `— offset ${offset}`;
  $("traceinfo").textContent =
    `termination ${out.termination}, retired ${out.retired}, ` +
    `${out.events_total} access events (showing ${out.events.length}), ` +
    `getpc: ${out.getpc.map((g) => `${g.kind}@${g.at}→${g.recovered}`).join(", ") || "none"}`;
  const table = $("tracetable");
  const body = table.querySelector("tbody");
  body.replaceChildren();
  out.events.forEach((e, i) => {
    const tr = document.createElement("tr");
    if (e.in_buffer && e.kind === "read") tr.className = "inbuf";
    for (const cellText of [i, e.kind, e.addr, e.size, e.at, e.in_buffer ? "yes" : ""]) {
      const td = document.createElement("td");
      td.textContent = cellText;
      tr.appendChild(td);
    }
    body.appendChild(tr);
  });
  table.hidden = out.events.length === 0;
}

await init();
$("btn-generate").addEventListener("click", generate);
$("btn-scan").addEventListener("click", scan);
scan();
