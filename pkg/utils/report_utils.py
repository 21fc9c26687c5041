"""
报告工具模块

支持：
- 输出目录管理（所有产物只写到配置的输出目录下）
- DataFrame 渲染为对齐的 Markdown 表格
- 报告与表格写入 Word 文档（保留中文字体）
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pandas as pd
from docx import Document
from docx.enum.text import WD_ALIGN_PARAGRAPH
from docx.oxml.ns import qn
from docx.shared import Pt

logger = logging.getLogger(__name__)


class ReportManager:
    """输出目录管理器，拒绝写到目录之外"""

    def __init__(self, base_dir: str = "./aft_output"):
        """
        初始化输出目录

        Args:
            base_dir: 输出的基础目录
        """
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)

    def _get_path(self, filename: str) -> Path:
        """获取文件的完整路径，并检查其位于输出目录内"""
        path = (self.base_dir / filename).resolve()
        root = self.base_dir.resolve()
        if root != path and root not in path.parents:
            raise ValueError(f"拒绝写出到输出目录之外: {filename}")
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_text(self, filename: str, content: str) -> str:
        """
        写入 UTF-8 文本，统一使用 \\n 换行

        Returns:
            文件路径
        """
        path = self._get_path(filename)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(content)
        logger.debug(f"[report] 写出 {path}")
        return str(path)

    def write_json(self, filename: str, payload) -> str:
        """写入 JSON（键序固定、保留中文）"""
        return self.write_text(filename, json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n")

    def write_frame(self, filename: str, frame: pd.DataFrame, float_format: str = "%.10g") -> str:
        """DataFrame 写为 CSV"""
        return self.write_text(filename, frame.to_csv(index=False, float_format=float_format, lineterminator="\n"))

    def list_files(self) -> list[str]:
        """列出输出目录下的全部文件（相对路径，排序）"""
        return sorted(str(p.relative_to(self.base_dir)) for p in self.base_dir.rglob("*") if p.is_file())

    def exists(self, filename: str) -> bool:
        return (self.base_dir / filename).exists()


def _format_cell(value, digits: int) -> str:
    if isinstance(value, float):
        if value != value:
            return "—"
        return f"{value:.{digits}f}"
    return str(value)


def render_markdown(frame: pd.DataFrame, digits: int = 4) -> str:
    """
    DataFrame 渲染为列宽对齐的 Markdown 表格

    空表只输出表头与分隔行；浮点数保留 digits 位小数，NaN 显示为 —。
    """
    header = [str(c) for c in frame.columns]
    rows = [[_format_cell(v, digits) for v in record] for record in frame.itertuples(index=False, name=None)]
    widths = [max([len(h), 3, *(len(r[j]) for r in rows)]) for j, h in enumerate(header)]

    def line(cells: list[str]) -> str:
        return "| " + " | ".join(c.ljust(widths[j]) for j, c in enumerate(cells)) + " |"

    out = [line(header), "| " + " | ".join("-" * w for w in widths) + " |"]
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


class WordReportWriter:
    """报告写入 Word 文档"""

    def __init__(self, title: str):
        self.doc = Document()
        self._add_heading(title, 0)

    def _set_run_font(self, run, font_name: str = "微软雅黑"):
        """设置 run 的字体，支持中文"""
        run.font.name = font_name
        run._element.rPr.rFonts.set(qn("w:eastAsia"), font_name)

    def _add_heading(self, text: str, level: int):
        heading = self.doc.add_heading(level=min(level, 9))
        self._set_run_font(heading.add_run(text))

    def add_section(self, title: str, level: int = 1):
        self._add_heading(title, level)

    def add_paragraph(self, text: str):
        para = self.doc.add_paragraph()
        self._set_run_font(para.add_run(text))

    def add_table(self, frame: pd.DataFrame, digits: int = 4):
        """添加表格：表头加粗，数值右对齐"""
        table = self.doc.add_table(rows=1, cols=max(len(frame.columns), 1))
        table.style = "Table Grid"
        for cell, name in zip(table.rows[0].cells, frame.columns):
            run = cell.paragraphs[0].add_run(str(name))
            run.bold = True
            self._set_run_font(run)
        for record in frame.itertuples(index=False, name=None):
            cells = table.add_row().cells
            for cell, value in zip(cells, record):
                para = cell.paragraphs[0]
                if isinstance(value, (int, float)):
                    para.alignment = WD_ALIGN_PARAGRAPH.RIGHT
                run = para.add_run(_format_cell(value, digits))
                run.font.size = Pt(9)
                self._set_run_font(run)

    def save(self, output_path: str | Path) -> str:
        """
        保存 Word 文档

        Returns:
            生成的 Word 文件路径
        """
        output_path = Path(output_path)
        if output_path.suffix != ".docx":
            output_path = Path(str(output_path) + ".docx")
        output_path.parent.mkdir(parents=True, exist_ok=True)
        self.doc.save(str(output_path))
        return str(output_path)
