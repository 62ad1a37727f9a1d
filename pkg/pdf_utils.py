"""
PDF rendering of a run report
"""
from fpdf import FPDF
import datetime
from pathlib import Path

from report_utils import grid_agreement, summarize

MAX_GRID_IMAGES = 6


class CpeLabPDF(FPDF):
    def header(self):
        self.set_font('helvetica', 'B', 15)
        self.cell(0, 10, 'Cold Posterior Lab - Run Report', border=False, ln=True, align='C')
        self.ln(5)

    def footer(self):
        self.set_y(-15)
        self.set_font('helvetica', 'I', 8)
        self.cell(0, 10, f'Page {self.page_no()}/{{nb}} - Generated on {datetime.datetime.now().strftime("%Y-%m-%d %H:%M")}', align='C')


def _latin1(text):
    # Core fonts only cover latin-1
    return str(text).encode('latin-1', 'replace').decode('latin-1')


def _table(pdf, headers, rows):
    width = (pdf.w - pdf.l_margin - pdf.r_margin) / len(headers)
    pdf.set_font('helvetica', 'B', 8)
    for h in headers:
        pdf.cell(width, 7, _latin1(h), border=1)
    pdf.ln()
    pdf.set_font('helvetica', '', 8)
    for row in rows:
        for value in row:
            text = f'{value:.4g}' if isinstance(value, float) else _latin1(value)
            pdf.cell(width, 6, text[:40], border=1)
        pdf.ln()


def generate_pdf_report(manifest):
    """
    Generate the run report as PDF bytes using fpdf2
    """
    pdf = CpeLabPDF()
    pdf.add_page()
    pdf.set_auto_page_break(auto=True, margin=15)

    # Run Info
    config = manifest.config
    pdf.set_font('helvetica', 'B', 12)
    pdf.cell(0, 10, 'Run Information', ln=True)
    pdf.set_font('helvetica', '', 10)
    for label, value in [
        ('Experiment:', f"{config.get('name', 'experiment')} ({config.get('kind')})"),
        ('Status:', manifest.status),
        ('Chains:', len(manifest.entries)),
        ('Temperatures:', ', '.join(f'{t:g}' for t in manifest.temperature_grid)),
        ('Config checksum:', manifest.config_checksum[:16]),
    ]:
        pdf.cell(50, 8, label, border=False)
        pdf.cell(0, 8, _latin1(value), ln=True)
    pdf.ln(5)

    for title, headers, rows in summarize(manifest):
        pdf.set_font('helvetica', 'B', 12)
        pdf.cell(0, 10, _latin1(title), ln=True)
        _table(pdf, headers, rows)
        pdf.ln(5)

    # Decision grids, if any were exported
    grids = [p for p in manifest.outputs if p.endswith('.png') and Path(p).exists()][:MAX_GRID_IMAGES]
    if grids:
        pdf.add_page()
        pdf.set_font('helvetica', 'B', 12)
        pdf.cell(0, 10, 'Decision Boundaries', ln=True)
        for path in grids:
            pdf.set_font('helvetica', 'I', 9)
            agreement = grid_agreement(path)
            caption = Path(path).stem if agreement is None else f'{Path(path).stem} (Bayes-rule agreement {agreement:.3f})'
            pdf.cell(0, 7, _latin1(caption), ln=True)
            pdf.image(path, w=60)
            pdf.ln(2)

    return bytes(pdf.output())
