"""
Page 2: run report
"""
from pathlib import Path

import pandas as pd
import streamlit as st

from report_utils import emit_report, grid_agreement, summarize


def _ce_curves(manifest):
    rows = [
        {"group": f"{e['group']} n={e['n']}", "T": e["temperature"], "ce": e["metrics"]["test_ce"]}
        for e in manifest.entries.values() if e["status"] == "completed"
    ]
    if not rows:
        return None
    frame = pd.DataFrame(rows).groupby(["T", "group"])["ce"].mean().unstack("group")
    frame.index = [f"{t:g}" for t in frame.index]
    return frame


def render():
    manifest = st.session_state.manifest
    st.title("📊 Run Report")

    if st.button("⬅️ Back to runs"):
        st.session_state.step = 1
        st.rerun()

    config = manifest.config
    st.markdown(f"### {config.get('name', 'experiment')} ({config.get('kind')})")

    statuses = [e["status"] for e in manifest.entries.values()]
    col1, col2, col3 = st.columns(3)
    col1.metric("Chains", len(statuses))
    col2.metric("Completed", statuses.count("completed"))
    col3.metric("Diverged / failed", len(statuses) - statuses.count("completed"))

    curves = _ce_curves(manifest)
    if curves is not None:
        st.markdown("## 📉 Test cross-entropy against temperature")
        st.line_chart(curves)

    for title, headers, rows in summarize(manifest):
        st.markdown(f"#### {title}")
        st.dataframe(pd.DataFrame(rows, columns=headers), use_container_width=True)

    grids = [p for p in manifest.outputs if p.endswith(".png") and Path(p).exists()]
    if grids:
        st.markdown("## 🗺️ Decision boundaries")
        selected = st.selectbox("Grid", grids, format_func=lambda p: Path(p).stem)
        st.image(selected)
        agreement = grid_agreement(selected)
        if agreement is not None:
            st.caption(f"Agreement with the Bayes rule: {agreement:.3f}")

    st.divider()
    from pdf_utils import generate_pdf_report
    try:
        st.download_button(
            label="📥 Download PDF Report",
            data=generate_pdf_report(manifest),
            file_name=f"{config.get('name', 'experiment')}_report.pdf",
            mime="application/pdf",
            use_container_width=True,
        )
    except Exception as e:
        st.error(f"Error generating PDF: {str(e)}")

    if manifest.entries:
        with st.expander("Markdown report"):
            st.markdown(emit_report(manifest))
