"""Dependency-free SVG reliability diagram (convenience output only)."""

from __future__ import annotations

from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def reliability_svg(series: dict[str, list[tuple[float, float]]], title: str = "", size: int = 360) -> str:
    """Mean predicted probability (x) against fraction of positives (y)."""
    pad = 44
    inner = size - 2 * pad

    def px(v):
        return pad + v * inner

    def py(v):
        return size - pad - v * inner

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="#444"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(1)}" y2="{py(1)}" stroke="#888" stroke-dasharray="4 3"/>',
        f'<text x="{size / 2}" y="{pad / 2 + 4}" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{size / 2}" y="{size - 10}" text-anchor="middle" font-size="11">mean predicted probability</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 12 {size / 2})">fraction of positives</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        out.append(f'<text x="{px(tick)}" y="{size - pad + 14}" text-anchor="middle" font-size="10">{tick:g}</text>')
        out.append(f'<text x="{pad - 6}" y="{py(tick) + 3}" text-anchor="end" font-size="10">{tick:g}</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        if pts:
            path = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for x, y in pts:
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = pad + 14 + 14 * i
        out.append(f'<rect x="{pad + 8}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{pad + 22}" y="{ly + 1}" font-size="10">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
