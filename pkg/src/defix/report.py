"""The ``report`` command: tab-delimited summary plus PNG figures under ``reports/``."""

from __future__ import annotations

from .evaluation import INFRACTION_KINDS
from .store import ArtifactStore, MissingArtifactError

MODE_ORDER = ("autopilot", "il_only", "rl_only", "defix")


def summary_rows(store: ArtifactStore) -> dict[str, dict]:
    found = {}
    for mode in MODE_ORDER:
        if store.has(f"eval_{mode}"):
            found[mode] = store.load_json(f"eval_{mode}")["summary"]
    return found


def render_table(summaries: dict[str, dict]) -> str:
    header = ["mode", "RC", "IS", "DS", "routes"] + list(INFRACTION_KINDS)
    lines = ["\t".join(header)]
    for mode, s in summaries.items():
        row = [mode, f"{s['RC']:.2f}", f"{s['IS']:.4f}", f"{s['DS']:.2f}", str(s["n_routes"])]
        row += [str(s["infractions"].get(k, 0)) for k in INFRACTION_KINDS]
        lines.append("\t".join(row))
    return "\n".join(lines)


def cmd_report(store: ArtifactStore) -> str:
    from . import plotting

    summaries = summary_rows(store)
    if not summaries:
        raise MissingArtifactError("no evaluation reports found; run `evaluate` first")
    table = render_table(summaries)
    fig_dir = store.root / "reports"
    store.put_bytes("reports", "summary_table", (table + "\n").encode(), suffix=".tsv")
    for name, fn in (("infractions", plotting.infraction_bars), ("scores", plotting.score_bars)):
        path = fn(summaries, fig_dir / f"{name}.png")
        store.put_file("reports", f"figure_{name}", path)
        path.unlink()
    for name in store.names("rl_"):
        curve = store.load_checkpoint(name).metadata.get("curve")
        if curve:
            path = plotting.training_curve(curve, fig_dir / f"{name}_curve.png")
            store.put_file("reports", f"figure_{name}_curve", path)
            path.unlink()
    figures = "\n".join(f"figure\t{store.entry(n)['path']}" for n in store.names("figure_"))
    return table + "\n---\n" + figures
