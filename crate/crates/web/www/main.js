import init, { graph_stats, assignments, quadratic_toy } from "./pkg/graphmeta_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const show = (id, text) => { $(id).textContent = JSON.stringify(JSON.parse(text), null, 2); };

function fmtAssignments(text) {
  const r = JSON.parse(text);
  if (r.error) return `error: ${r.error}`;
  const row = (v) => v.map((x) => x.toFixed(3)).join("  ");
  const q = r.q.map((v, i) => `${String(i).padStart(2)}: ${row(v)}`).join("\n");
  const t = r.target.map((v, i) => `${String(r.selected[i]).padStart(2)}: ${row(v)}`).join("\n");
  return `soft assignment\n${q}\n\nselected rows, sharpened target\n${t}`;
}

await init();

$("g-run").onclick = () =>
  show("g-out", graph_stats(num("g-classes"), num("g-per"), num("g-pin"), num("g-pout"), BigInt(num("g-seed"))));

$("a-run").onclick = () => {
  $("a-out").textContent = fmtAssignments(assignments($("a-points").value, $("a-protos").value, num("a-k")));
};

const toy = () => show("q-out", quadratic_toy(num("q-theta"), num("q-a"), num("q-alpha")));
for (const id of ["q-theta", "q-a", "q-alpha"]) $(id).oninput = toy;

$("g-run").click();
$("a-run").click();
toy();
