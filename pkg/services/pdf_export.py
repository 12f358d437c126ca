"""
PDF Report Generator
Renders the ablation report: module, feature and loss tables with the
full-scale reference column
"""

import io
from typing import Dict, Optional

import pandas as pd
from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import cm
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

TABLE_TITLES = {
    'module': 'Module ablation',
    'feature': 'Feature ablation',
    'loss': 'Loss ablation',
}


class PDFExporter:
    def __init__(self):
        self.styles = getSampleStyleSheet()
        self._setup_custom_styles()

    def _setup_custom_styles(self):
        """Setup custom paragraph styles"""
        self.styles.add(ParagraphStyle(
            name='CustomTitle',
            parent=self.styles['Heading1'],
            fontSize=22,
            textColor=colors.HexColor('#2c3e50'),
            spaceAfter=24,
            alignment=TA_CENTER
        ))

        self.styles.add(ParagraphStyle(
            name='SectionHeader',
            parent=self.styles['Heading2'],
            fontSize=15,
            textColor=colors.HexColor('#34495e'),
            spaceBefore=18,
            spaceAfter=10,
        ))

    def _table(self, frame: pd.DataFrame) -> Table:
        data = [['Configuration', 'Seeds', 'mIoU (desk)', 'mIoU (full-scale ref.)']]
        for row in frame.itertuples(index=False):
            data.append([row.configuration, row.seeds, f"{row.miou:.2f}", f"{row.reference_full_scale:.1f}"])

        table = Table(data, colWidths=[6*cm, 3*cm, 3.5*cm, 4*cm])
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#34495e')),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.whitesmoke),
            ('ALIGN', (1, 0), (-1, -1), 'CENTER'),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 10),
            ('BOTTOMPADDING', (0, 0), (-1, 0), 8),
            ('GRID', (0, 0), (-1, -1), 1, colors.HexColor('#bdc3c7')),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#ecf0f1')])
        ]))
        return table

    def generate_report(self, tables: Dict[str, pd.DataFrame], run_info: Optional[Dict[str, str]] = None) -> bytes:
        """
        Generate the ablation PDF

        Args:
            tables: Ablation tables keyed by 'module', 'feature', 'loss'
            run_info: Key/value lines shown under the title (seed set, image size, ...)

        Returns:
            PDF bytes, identical across reruns with the same inputs
        """
        buffer = io.BytesIO()
        doc = SimpleDocTemplate(
            buffer,
            pagesize=A4,
            rightMargin=2*cm,
            leftMargin=2*cm,
            topMargin=2*cm,
            bottomMargin=2*cm,
            title='DCDNet ablation report',
            invariant=True
        )

        story = [Paragraph("DCDNet Ablation Report", self.styles['CustomTitle'])]

        if run_info:
            info = Table([[f"{key}:", str(value)] for key, value in run_info.items()], colWidths=[5*cm, 10*cm])
            info.setStyle(TableStyle([
                ('FONTNAME', (0, 0), (0, -1), 'Helvetica-Bold'),
                ('FONTSIZE', (0, 0), (-1, -1), 10),
                ('TEXTCOLOR', (0, 0), (0, -1), colors.HexColor('#34495e')),
                ('LINEBELOW', (0, 0), (-1, -1), 0.5, colors.HexColor('#ecf0f1')),
            ]))
            story.append(info)
            story.append(Spacer(1, 0.8*cm))

        for name, frame in tables.items():
            story.append(Paragraph(TABLE_TITLES.get(name, name), self.styles['SectionHeader']))
            story.append(self._table(frame))
            story.append(Spacer(1, 0.6*cm))

        story.append(Paragraph(
            "Reference values are the published full-scale results of the matching "
            "configuration; desk-scale numbers are measured on synthetic episodes and "
            "are compared by trend only.",
            self.styles['Italic']
        ))

        doc.build(story)
        buffer.seek(0)
        return buffer.getvalue()
