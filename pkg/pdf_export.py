"""
Modulo per l'esportazione del report in formato PDF
Genera un report PDF con le statistiche di concordanza di uno sweep
"""

import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)


def _fmt(value: Any, digits: int = 5) -> str:
    try:
        value = float(value)
    except (ValueError, TypeError):
        return 'N/A'
    if np.isnan(value):
        return 'N/A'
    return f"{value:.{digits}g}"


def generate_pdf_report(report: Any, path: Union[str, Path], title: Optional[str] = None) -> Optional[Path]:
    """
    Genera il report PDF di uno sweep.

    Args:
        report: SweepReport (bench)
        path: file PDF di destinazione
        title: nome dell'esperimento

    Returns:
        Path del PDF generato, None se reportlab non è disponibile
    """
    try:
        from reportlab.lib.pagesizes import A4
        from reportlab.lib import colors
        from reportlab.lib.units import cm
        from reportlab.platypus import SimpleDocTemplate, Table, TableStyle, Paragraph, Spacer
        from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
        from reportlab.lib.enums import TA_CENTER
    except ImportError:
        logger.error("Libreria reportlab non installata: report PDF non generato")
        return None

    path = Path(path)
    # invariant=1: nessuna data nel file, PDF identico a parità di input
    doc = SimpleDocTemplate(str(path), pagesize=A4, invariant=1,
                            rightMargin=1*cm, leftMargin=1*cm,
                            topMargin=1.5*cm, bottomMargin=1*cm)
    elements = []
    styles = getSampleStyleSheet()

    title_style = ParagraphStyle(
        'CustomTitle',
        parent=styles['Heading1'],
        fontSize=18,
        textColor=colors.HexColor('#1976D2'),
        alignment=TA_CENTER,
        spaceAfter=10
    )
    header_style = ParagraphStyle(
        'SectionHeader',
        parent=styles['Heading2'],
        fontSize=12,
        textColor=colors.HexColor('#1976D2'),
        spaceBefore=10,
        spaceAfter=8
    )
    label = 'lambda' if report.sweep == 'dose' else 'sigma_s'

    # ============================================================================
    # HEADER
    # ============================================================================
    elements.append(Paragraph(f"REPORT SWEEP {report.sweep.upper()}", title_style))

    meta_data = [
        ["Esperimento:", title or report.sweep, "Seme:", str(report.seed)],
        ["Valori:", f"{len(report.grid)} ({label})", "Config:", report.config_hash[:16]],
    ]
    meta_table = Table(meta_data, colWidths=[3*cm, 5*cm, 3*cm, 5*cm])
    meta_table.setStyle(TableStyle([
        ('FONTNAME', (0, 0), (-1, -1), 'Helvetica'),
        ('FONTSIZE', (0, 0), (-1, -1), 9),
        ('TEXTCOLOR', (0, 0), (0, -1), colors.grey),
        ('TEXTCOLOR', (2, 0), (2, -1), colors.grey),
        ('BACKGROUND', (0, 0), (-1, -1), colors.HexColor('#f5f5f5')),
        ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
    ]))
    elements.append(meta_table)
    elements.append(Spacer(1, 0.5*cm))

    # ============================================================================
    # CONCORDANZA
    # ============================================================================
    elements.append(Paragraph("1. CONCORDANZA (BLAND-ALTMAN)", header_style))

    table_data = [[label, "Metrica", "N", "Bias", "Std", "Lim. inf.", "Lim. sup.", "r", "T_n"]]
    for _, row in report.to_frame().iterrows():
        table_data.append([
            f"{row['parameter']:g}",
            row['metric'],
            str(int(row['n'])),
            _fmt(row['bias']),
            _fmt(row['std']),
            _fmt(row['lower']),
            _fmt(row['upper']),
            _fmt(row['pearson_r'], 4),
            _fmt(row['T_n'], 4),
        ])

    stats_table = Table(table_data, colWidths=[1.6*cm, 2.2*cm, 1.2*cm, 2.2*cm, 2.2*cm, 2.2*cm, 2.2*cm, 1.8*cm, 1.6*cm],
                        repeatRows=1)
    stats_table.setStyle(TableStyle([
        ('FONTNAME', (0, 0), (-1, -1), 'Helvetica'),
        ('FONTSIZE', (0, 0), (-1, -1), 8),
        ('VALIGN', (0, 0), (-1, -1), 'MIDDLE'),
        ('ALIGN', (2, 0), (-1, -1), 'CENTER'),
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#1976D2')),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
        ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
        ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#f9f9f9')]),
        ('CELLPADDING', (0, 0), (-1, -1), 4),
    ]))
    elements.append(stats_table)
    elements.append(Spacer(1, 0.3*cm))

    # ============================================================================
    # ANDAMENTI
    # ============================================================================
    elements.append(Paragraph("2. ANDAMENTI (SPEARMAN)", header_style))
    trend_data = [["Serie", "rho"]] + [[name, _fmt(value, 4)] for name, value in sorted(report.trends.items())]
    if report.tn_baseline is not None:
        trend_data.append(["T_n volume originale (HU)", _fmt(report.tn_baseline, 4)])
    trend_table = Table(trend_data, colWidths=[7*cm, 3*cm])
    trend_table.setStyle(TableStyle([
        ('FONTNAME', (0, 0), (-1, -1), 'Helvetica'),
        ('FONTSIZE', (0, 0), (-1, -1), 9),
        ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#1976D2')),
        ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
        ('GRID', (0, 0), (-1, -1), 0.5, colors.grey),
        ('CELLPADDING', (0, 0), (-1, -1), 4),
    ]))
    elements.append(trend_table)

    # ============================================================================
    # ERRORI
    # ============================================================================
    if report.failures:
        elements.append(Spacer(1, 0.5*cm))
        elements.append(Paragraph("3. MISURE NON RIUSCITE", header_style))
        for f in report.failures[:50]:
            elements.append(Paragraph(
                f"{f.get('phantom', '?')} / {f.get('airway_id', '-')} ({label} = {f.get('parameter')}): "
                f"{f.get('stage')}: {f.get('error')}",
                styles['Normal']))
        if len(report.failures) > 50:
            elements.append(Paragraph(f"... altri {len(report.failures) - 50} errori in run-manifest.json",
                                      styles['Normal']))

    doc.build(elements)
    logger.info("Report PDF scritto in %s", path)
    return path
