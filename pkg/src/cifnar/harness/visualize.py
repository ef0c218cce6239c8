"""alpha-curve / CTC-spike dumps and a static SVG overlay for one utterance."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..checkpoint import load_checkpoint
from ..cif import BETA, write_alpha_csv
from ..ctc import extract_spikes, write_spike_csv
from ..synth import Utterance
from .evaluate import predict

WIDTH, HEIGHT, PAD = 800, 320, 40


@dataclass
class VisualizationFiles:
    alpha_csv: Path
    spike_csv: Path
    svg: Path


def _x(u, T):
    return PAD + (WIDTH - 2 * PAD) * (u + 0.5) / max(T, 1)


def _y(v, vmax):
    return HEIGHT - PAD - (HEIGHT - 2 * PAD) * (v / vmax)


def _polyline(xs, ys, cls, color):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def render_svg(alpha, posteriors, fire_frames, true_ends, theta, title="", merge=False) -> str:
    """Overlay of alpha, accumulated weight, fires, CTC spikes and true boundaries.

    True token ends are red dotted vertical lines (class ``true-boundary``),
    fires are blue dashed lines (class ``fire``), spikes are orange dots.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    T = len(alpha)
    acc = np.cumsum(alpha)
    vmax = max(1.0, float(acc[-1]) if T else 1.0)
    xs = [_x(u, T) for u in range(T)]
    p_tok = np.asarray(posteriors)[:, 1:].max(axis=1) if T else np.zeros(0)
    spikes = extract_spikes(posteriors, theta, merge).spikes if T else np.zeros(0)
    top, bottom = _y(vmax, vmax), _y(0, vmax)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line class="axis" x1="{PAD}" y1="{bottom:.2f}" x2="{WIDTH - PAD}" y2="{bottom:.2f}" stroke="black"/>',
        f'<line class="axis" x1="{PAD}" y1="{top:.2f}" x2="{PAD}" y2="{bottom:.2f}" stroke="black"/>',
    ]
    for k in range(1, int(vmax) + 1):
        yk = _y(k, vmax)
        parts.append(f'<line class="threshold" x1="{PAD}" y1="{yk:.2f}" x2="{WIDTH - PAD}" y2="{yk:.2f}" '
                     f'stroke="#ccc" stroke-width="0.5"/>')
    parts.append(_polyline(xs, [_y(a, vmax) for a in alpha], "alpha", "black"))
    parts.append(_polyline(xs, [_y(a, vmax) for a in acc], "accumulated", "green"))
    parts.append(_polyline(xs, [_y(p, vmax) for p in p_tok], "ctc-posterior", "orange"))
    for u in np.flatnonzero(spikes):
        parts.append(f'<circle class="spike" cx="{xs[u]:.2f}" cy="{_y(p_tok[u], vmax):.2f}" r="3" fill="orange"/>')
    for f in fire_frames:
        xf = _x(f, T)
        parts.append(f'<line class="fire" x1="{xf:.2f}" y1="{top:.2f}" x2="{xf:.2f}" y2="{bottom:.2f}" '
                     f'stroke="blue" stroke-dasharray="6,3"/>')
    for e in true_ends:
        # drawn on the right edge of the last frame of the token
        xe = _x(e, T) + 0.5 * (WIDTH - 2 * PAD) / max(T, 1)
        parts.append(f'<line class="true-boundary" x1="{xe:.2f}" y1="{top:.2f}" x2="{xe:.2f}" y2="{bottom:.2f}" '
                     f'stroke="red" stroke-dasharray="2,2"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def visualize_params(params, cfg, utt: Utterance, out_dir, stem: str = "utt") -> VisualizationFiles:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict(params, cfg, [utt])
    alpha, post = pred.alphas[0], pred.posteriors[0]
    files = VisualizationFiles(out / f"{stem}_alpha.csv", out / f"{stem}_spikes.csv", out / f"{stem}.svg")
    write_alpha_csv(files.alpha_csv, alpha, BETA, cfg.residual_threshold)
    write_spike_csv(files.spike_csv, post, cfg.theta, cfg.merge_spikes)
    title = f"ref {utt.tokens} hyp {pred.hypotheses[0]}"
    files.svg.write_text(render_svg(alpha, post, pred.fire_frames[0], utt.end_frames(), cfg.theta, title,
                                          cfg.merge_spikes))
    return files


def visualize(checkpoint, utt: Utterance, out_dir, stem: str = "utt") -> VisualizationFiles:
    cfg, params, _ = load_checkpoint(checkpoint)
    return visualize_params(params, cfg, utt, out_dir, stem)


def plot_curves(metrics_log, out_path, keys=("total", "ctc", "ce_cif", "ce_ctx", "ali", "qua")) -> Path:
    """Render per-loss training curves from a JSONL log as an SVG (deterministic output)."""
    steps, series = [], {k: [] for k in keys}
    with Path(metrics_log).open() as f:
        for line in f:
            rec = json.loads(line)
            if "total" not in rec:
                continue
            steps.append(rec["step"])
            for k in keys:
                series[k].append(max(float(rec[k]), 1e-6))
    colors = ["black", "orange", "blue", "purple", "red", "green"]
    n = max(len(steps), 1)
    logs = {k: np.log10(v) for k, v in series.items()}
    lo = min((v.min() for v in logs.values() if len(v)), default=-1.0)
    hi = max((v.max() for v in logs.values() if len(v)), default=1.0)
    span = max(hi - lo, 1e-9)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
             f'viewBox="0 0 {WIDTH} {HEIGHT}">', '<title>training losses (log10)</title>']
    for i, k in enumerate(keys):
        xs = [PAD + (WIDTH - 2 * PAD) * j / max(n - 1, 1) for j in range(len(steps))]
        ys = [HEIGHT - PAD - (HEIGHT - 2 * PAD) * (v - lo) / span for v in logs[k]]
        parts.append(_polyline(xs, ys, f"curve-{k}", colors[i % len(colors)]))
        parts.append(f'<text x="{WIDTH - PAD + 2}" y="{PAD + 12 * i}" font-size="10" '
                     f'fill="{colors[i % len(colors)]}">{escape(k)}</text>')
    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.write_text("\n".join(parts) + "\n")
    return out_path
