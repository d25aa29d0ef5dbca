"""
控制台表格输出
按显示宽度对齐（中文字符占两列），设置NO_COLOR或输出不是终端时不使用颜色
"""

import os
import sys
import unicodedata
from typing import Any, List, Optional, Sequence, TextIO

BOLD = "\033[1m"
RESET = "\033[0m"


def display_width(text: str) -> int:
    return sum(2 if unicodedata.east_asian_width(char) in ("W", "F") else 1 for char in text)


def _pad(text: str, width: int, align_right: bool) -> str:
    padding = " " * (width - display_width(text))
    return padding + text if align_right else text + padding


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    return "" if value is None else str(value)


def use_color(stream: TextIO) -> bool:
    return "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()


def render_table(headers: Sequence[str], rows: Sequence[Sequence[Any]], title: Optional[str] = None,
                 color: bool = False) -> str:
    """渲染纯文本表格，数字列右对齐"""
    cells: List[List[str]] = [[_cell(value) for value in row] for row in rows]
    widths = [display_width(header) for header in headers]
    for row in cells:
        for i, value in enumerate(row):
            widths[i] = max(widths[i], display_width(value))
    numeric = [all(isinstance(row[i], (int, float)) for row in rows) if rows else False
               for i in range(len(headers))]

    header_line = "  ".join(_pad(header, widths[i], numeric[i]) for i, header in enumerate(headers))
    if color:
        header_line = f"{BOLD}{header_line}{RESET}"
    lines = []
    if title:
        lines.append(title)
    lines.append(header_line)
    lines.append("  ".join("-" * width for width in widths))
    for row in cells:
        lines.append("  ".join(_pad(value, widths[i], numeric[i]) for i, value in enumerate(row)))
    return "\n".join(lines)


def print_table(headers: Sequence[str], rows: Sequence[Sequence[Any]], title: Optional[str] = None,
                stream: Optional[TextIO] = None) -> None:
    """输出表格到标准输出"""
    stream = stream or sys.stdout
    stream.write(render_table(headers, rows, title, color=use_color(stream)) + "\n")
