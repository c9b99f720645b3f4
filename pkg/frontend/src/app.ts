/**
 * DOM wiring for the rating app: entry form, one image at a time at a
 * fixed 100x100 CSS size, Real/Fake buttons with R/F keyboard shortcuts,
 * forward-only progress, and an admin results view behind the token.
 */

import { StudyApi } from "./api.js";
import { SessionFlow, SessionViewState } from "./state.js";
import { reportView } from "./report.js";

const api = new StudyApi("");
const flow = new SessionFlow(api);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function show(id: string, visible: boolean): void {
  el(id).style.display = visible ? "" : "none";
}

function render(state: SessionViewState): void {
  show("entry-view", state.phase === "idle" || state.phase === "error");
  show("rate-view", state.phase === "showing" || state.phase === "submitting" ||
    state.phase === "loading");
  show("done-view", state.phase === "done");

  el<HTMLParagraphElement>("entry-error").textContent = state.error ?? "";
  el<HTMLParagraphElement>("notice").textContent = state.notice ?? "";

  const busy = state.phase !== "showing";
  el<HTMLButtonElement>("btn-real").disabled = busy;
  el<HTMLButtonElement>("btn-fake").disabled = busy;

  if (state.current) {
    el<HTMLImageElement>("wound-image").src = state.current.image_url;
    el<HTMLSpanElement>("progress").textContent =
      `image ${state.current.index} of ${state.current.total}`;
  } else if (state.phase === "loading") {
    el<HTMLSpanElement>("progress").textContent = "loading...";
  }
  if (state.phase === "done") {
    el<HTMLSpanElement>("done-count").textContent = String(state.submitted);
  }
}

async function renderAdmin(): Promise<void> {
  const token = el<HTMLInputElement>("admin-token").value;
  const target = el<HTMLDivElement>("admin-result");
  try {
    const view = reportView(await api.report(token));
    const rows = view.histogram
      .map((row) => {
        const realBar = "#".repeat(row.real);
        const synthBar = "#".repeat(row.synthetic);
        return `<tr><td>${row.rating}</td><td>${row.real} ${realBar}</td>` +
          `<td>${row.synthetic} ${synthBar}</td></tr>`;
      })
      .join("");
    target.innerHTML = `
      <p>marked real: <b>${view.markedRealPct}</b> &middot;
         real accuracy: <b>${view.realAccuracyPct}</b> &middot;
         synthetic accuracy: <b>${view.syntheticAccuracyPct}</b> &middot;
         fooling rate: <b>${view.foolingRatePct}</b></p>
      <p>rating means &mdash; real: <b>${view.realMean}</b>,
         synthetic: <b>${view.syntheticMean}</b></p>
      <p>${view.tLine}</p>
      <p>${view.pearsonLine}</p>
      <table class="hist">
        <tr><th>rating</th><th>real</th><th>synthetic</th></tr>${rows}
      </table>
      ${view.warnings.map((w) => `<p class="warn">${w}</p>`).join("")}`;
  } catch (err) {
    target.innerHTML = `<p class="warn">access denied or no data (${
      err instanceof Error ? err.message : String(err)
    })</p>`;
  }
}

export function boot(): void {
  flow.subscribe(render);
  el<HTMLButtonElement>("btn-start").addEventListener("click", () => {
    void flow.start(el<HTMLInputElement>("rater-id").value);
  });
  el<HTMLButtonElement>("btn-real").addEventListener("click", () => {
    void flow.submit("real");
  });
  el<HTMLButtonElement>("btn-fake").addEventListener("click", () => {
    void flow.submit("fake");
  });
  document.addEventListener("keydown", (event) => {
    if (event.key === "r" || event.key === "R") void flow.submit("real");
    if (event.key === "f" || event.key === "F") void flow.submit("fake");
  });
  el<HTMLButtonElement>("btn-admin").addEventListener("click", () => {
    void renderAdmin();
  });
}

boot();
