import init, { mc_bias_explorer, shadow_price, spectral_check } from "./pkg/pseudopanel_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function show(el, text, isError = false) {
  el.textContent = text;
  el.classList.toggle("err", isError);
}

function runMc() {
  const status = $("mc-status");
  const input = {
    dgp: {
      beta: num("mc-beta"),
      delta_endog: num("mc-delta"),
      reliability: num("mc-lambda"),
      n_units: num("mc-units"),
      waves: num("mc-waves"),
      seed: num("mc-seed"),
    },
    reps: num("mc-reps"),
    grouped: $("mc-grouped").checked,
  };
  show(status, "running…");
  // Let the status paint before the synchronous run.
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const out = JSON.parse(mc_bias_explorer(JSON.stringify(input)));
      const body = $("mc-table").querySelector("tbody");
      body.replaceChildren();
      for (const r of out.rows) {
        const tr = document.createElement("tr");
        const cells = [r.estimator, r.iv ? "yes" : "no", r.mean, r.bias, r.rmse, r.mc_se, `${r.n_ok}/${out.reps}`];
        for (const c of cells) {
          const td = document.createElement("td");
          td.textContent = typeof c === "number" ? c.toFixed(4) : c;
          tr.appendChild(td);
        }
        body.appendChild(tr);
      }
      $("mc-table").hidden = false;
      show(status, `${((performance.now() - t0) / 1000).toFixed(1)} s; pooled OLS limit ${out.pooled_ols_plim.toFixed(4)}`);
    } catch (e) {
      show(status, String(e), true);
    }
  }, 20);
}

function runShadow() {
  const g = $("sp-gamma").value.trim();
  try {
    const r = JSON.parse(shadow_price(num("sp-cs"), num("sp-ts"), g === "" ? NaN : Number(g)));
    show($("sp-out"),
      `γ_ii = ${r.gamma_ii} (${r.gamma_source})\nshadow-price income elasticity = ${r.shadow_income_elasticity.toFixed(4)}`);
  } catch (e) {
    show($("sp-out"), String(e), true);
  }
}

function runSpectral() {
  try {
    const r = JSON.parse(spectral_check($("spec-delta").value, num("spec-mu"), num("spec-eps")));
    show($("spec-out"),
      `${r.cells} cells × ${r.waves} waves\nmax |BΩ − (BΩ)'| = ${r.asymmetry.toExponential(3)}\n` +
      `decomposable: ${r.decomposable}   δ constant over waves: ${r.time_invariant_delta}`);
  } catch (e) {
    show($("spec-out"), String(e), true);
  }
}

function perturb() {
  try {
    const rows = JSON.parse($("spec-delta").value);
    const c = Math.floor(Math.random() * rows.length);
    const t = Math.floor(Math.random() * rows[c].length);
    rows[c][t] = Number((rows[c][t] * 1.5).toPrecision(4));
    $("spec-delta").value = "[" + rows.map((r) => JSON.stringify(r)).join(",\n ") + "]";
    runSpectral();
  } catch (e) {
    show($("spec-out"), String(e), true);
  }
}

await init();
$("mc-run").addEventListener("click", runMc);
$("sp-run").addEventListener("click", runShadow);
$("spec-run").addEventListener("click", runSpectral);
$("spec-perturb").addEventListener("click", perturb);
runShadow();
runSpectral();
