"""Minimal SVG emitter for line charts and histograms (no plotting deps)."""

__all__ = ["curve_svg", "histogram_svg"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 60, 20, 20, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#17becf", "#7f7f7f")


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def _frame(parts, x_label, y_label, x_lo, x_hi, y_lo, y_hi):
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<line x1="{_ML}" y1="{_H-_MB}" x2="{_W-_MR}" y2="{_H-_MB}" stroke="black"/>',
        f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H-_MB}" stroke="black"/>',
    ]
    for i in range(5):
        fx = x_lo + i * (x_hi - x_lo) / 4
        px = _ML + i * (_W - _ML - _MR) / 4
        head.append(f'<text x="{px:.1f}" y="{_H-_MB+16}" text-anchor="middle">{fx:.3g}</text>')
        fy = y_lo + i * (y_hi - y_lo) / 4
        py = _H - _MB - i * (_H - _MT - _MB) / 4
        head.append(f'<text x="{_ML-6}" y="{py+4:.1f}" text-anchor="end">{fy:.3g}</text>')
    head.append(f'<text x="{(_ML+_W-_MR)/2}" y="{_H-10}" text-anchor="middle">{x_label}</text>')
    head.append(f'<text x="14" y="{(_MT+_H-_MB)/2}" text-anchor="middle" '
                f'transform="rotate(-90 14 {(_MT+_H-_MB)/2})">{y_label}</text>')
    return head + parts + ["</svg>"]


def curve_svg(x, methods, x_label="x", y_label="power"):
    """Line chart of per-method series over x; y axis fixed to [0, 1]."""
    x = [float(v) for v in x]
    x_lo, x_hi = min(x), max(x)
    parts = []
    for ci, (name, series) in enumerate(methods.items()):
        color = _COLORS[ci % len(_COLORS)]
        px = _scale(x, x_lo, x_hi, _ML, _W - _MR)
        py = _scale(series["power"], 0.0, 1.0, _H - _MB, _MT)
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for a, b in zip(px, py):
            parts.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>')
        ly = _MT + 16 * ci
        parts.append(f'<line x1="{_W-_MR-150}" y1="{ly}" x2="{_W-_MR-130}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_W-_MR-125}" y="{ly+4}">{name}</text>')
    return "\n".join(_frame(parts, x_label, y_label, x_lo, x_hi, 0.0, 1.0))


def histogram_svg(bin_edges, counts, x_label="p-value", y_label="count"):
    """Side-by-side bars per case over shared bins."""
    edges = [float(e) for e in bin_edges]
    names = list(counts)
    top = max(max(int(c) for c in counts[n]) for n in names) or 1
    parts = []
    n_cases = len(names)
    for ci, name in enumerate(names):
        color = _COLORS[ci % len(_COLORS)]
        for b, cnt in enumerate(counts[name]):
            x0, x1 = edges[b], edges[b + 1]
            w = (x1 - x0) / n_cases
            lo = x0 + ci * w
            px0 = _scale([lo], edges[0], edges[-1], _ML, _W - _MR)[0]
            px1 = _scale([lo + w], edges[0], edges[-1], _ML, _W - _MR)[0]
            py = _scale([int(cnt)], 0, top, _H - _MB, _MT)[0]
            parts.append(f'<rect x="{px0:.1f}" y="{py:.1f}" width="{px1-px0:.1f}" '
                         f'height="{_H-_MB-py:.1f}" fill="{color}" fill-opacity="0.7"/>')
        ly = _MT + 16 * ci
        parts.append(f'<rect x="{_W-_MR-150}" y="{ly-8}" width="20" height="10" fill="{color}"/>')
        parts.append(f'<text x="{_W-_MR-125}" y="{ly+2}">{name}</text>')
    return "\n".join(_frame(parts, x_label, y_label, edges[0], edges[-1], 0, top))
