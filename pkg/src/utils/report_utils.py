"""Report rendering: Markdown tables, HTML pages and SVG line charts."""

import logging
from html import escape
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import markdown

from ..base import LabError

logger = logging.getLogger(__name__)

SERIES_COLORS = ("#3498db", "#e74c3c", "#2ecc71", "#f39c12", "#9b59b6", "#1abc9c", "#34495e", "#d35400")

HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{title}</title>
    <style>
        body {{ font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', sans-serif;
                line-height: 1.6; max-width: 900px; margin: 0 auto; padding: 40px;
                color: #333; }}
        h1, h2, h3 {{ color: #2c3e50; margin-top: 1.5em; }}
        h1 {{ border-bottom: 3px solid #3498db; padding-bottom: 10px; }}
        h2 {{ border-bottom: 1px solid #bdc3c7; padding-bottom: 5px; }}
        code {{ background-color: #f4f4f4; padding: 2px 6px; border-radius: 3px;
                font-family: 'Courier New', monospace; font-size: 0.9em; }}
        table {{ border-collapse: collapse; width: 100%; margin: 1em 0; }}
        th, td {{ border: 1px solid #ddd; padding: 8px; text-align: left; }}
        th {{ background-color: #3498db; color: white; }}
        img {{ max-width: 100%; }}
    </style>
</head>
<body>
{body}
</body>
</html>"""


class ReportError(LabError):
    """Raised when a report cannot be written."""
    pass


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def markdown_table(rows: Sequence[Dict[str, Any]], columns: Sequence[str]) -> str:
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(_cell(row.get(c)) for c in columns) + " |")
    return "\n".join(lines)


def markdown_to_html(content: str, title: str = "Layout Lab Report") -> str:
    body = markdown.markdown(content, extensions=["extra", "toc"])
    return HTML_TEMPLATE.format(title=escape(title), body=body)


def save_report(content: str, output_dir: Union[str, Path], base_name: str = "report",
                title: str = "Layout Lab Report") -> List[Path]:
    """
    Write a Markdown report and its HTML rendering.

    Returns:
        Paths of the written files

    Raises:
        ReportError: If the files cannot be written
    """
    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        md_path = output_dir / f"{base_name}.md"
        html_path = output_dir / f"{base_name}.html"
        md_path.write_text(content, encoding="utf-8")
        html_path.write_text(markdown_to_html(content, title), encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write report to {output_dir}: {e}")
        raise ReportError(f"Cannot write report: {e}")
    return [md_path, html_path]


def svg_line_chart(series: Dict[str, Sequence[Tuple[float, float]]], title: str = "",
                   x_label: str = "step", y_label: str = "", width: int = 640, height: int = 360,
                   y_range: Optional[Tuple[float, float]] = None) -> str:
    """One polyline per named series on shared linear axes."""
    points = [(x, y) for values in series.values() for x, y in values if y is not None]
    left, right, top, bottom = 60, 150, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    if points:
        x_min, x_max = min(p[0] for p in points), max(p[0] for p in points)
        y_min, y_max = y_range or (min(p[1] for p in points), max(p[1] for p in points))
    else:
        x_min, x_max, y_min, y_max = 0.0, 1.0, 0.0, 1.0
    x_span = (x_max - x_min) or 1.0
    y_span = (y_max - y_min) or 1.0

    def sx(x: float) -> float:
        return left + (x - x_min) / x_span * plot_w

    def sy(y: float) -> float:
        return top + plot_h - (y - y_min) / y_span * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(x_label)}</text>',
        f'<text x="15" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {top + plot_h / 2:.1f})">{escape(y_label)}</text>',
    ]
    for value, anchor_y in ((y_min, top + plot_h), (y_max, top)):
        parts.append(f'<text x="{left - 5}" y="{anchor_y + 4:.1f}" text-anchor="end">{value:.3g}</text>')
    for value, anchor_x in ((x_min, left), (x_max, left + plot_w)):
        parts.append(f'<text x="{anchor_x:.1f}" y="{top + plot_h + 16}" text-anchor="middle">{value:.6g}</text>')

    for index, (name, values) in enumerate(series.items()):
        color = SERIES_COLORS[index % len(SERIES_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in values if y is not None)
        if coords:
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        legend_y = top + 16 * index
        parts.append(f'<line x1="{left + plot_w + 10}" y1="{legend_y}" x2="{left + plot_w + 30}" '
                     f'y2="{legend_y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + plot_w + 35}" y="{legend_y + 4}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def save_svg(path: Union[str, Path], svg: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path
