#!/usr/bin/env python3
"""
Unit tests for report_utils.py module.
"""

import shutil
import tempfile
import unittest
from pathlib import Path

from src.utils.report_utils import markdown_table, markdown_to_html, save_report, save_svg, svg_line_chart


class TestReportUtils(unittest.TestCase):
    """Test cases for report rendering."""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_markdown_table(self):
        table = markdown_table([{"variant": "siam", "spatial": 0.5, "seeds": 3}, {"variant": "m3"}],
                               ("variant", "spatial", "seeds"))
        lines = table.splitlines()
        self.assertEqual(lines[0], "| variant | spatial | seeds |")
        self.assertEqual(lines[2], "| siam | 0.5000 | 3 |")
        self.assertEqual(lines[3], "| m3 | - | - |")

    def test_html_has_table(self):
        html = markdown_to_html(markdown_table([{"a": 1}], ("a",)), title="T & U")
        self.assertIn("<table>", html)
        self.assertIn("<title>T &amp; U</title>", html)

    def test_save_report(self):
        paths = save_report("# Ablation\n", self.temp_dir, "report")
        self.assertEqual([p.name for p in paths], ["report.md", "report.html"])
        self.assertIn("<h1", paths[1].read_text(encoding="utf-8"))

    def test_line_chart(self):
        svg = svg_line_chart({"siam image-layout": [(0, 0.1), (10, 0.4)], "empty": []}, title="Trend")
        self.assertTrue(svg.startswith("<svg"))
        self.assertIn("polyline", svg)
        self.assertIn("siam image-layout", svg)
        path = save_svg(self.temp_dir / "c.svg", svg)
        self.assertTrue(path.exists())


if __name__ == '__main__':
    unittest.main()
