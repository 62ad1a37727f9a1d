import os

import streamlit as st

from config import DEFAULT_OUTPUT_DIR, OUTPUT_DIR_ENV
from pages import Run_Select as run_select, Report as report

# ---------------- Session State Initialization ----------------
if "step" not in st.session_state:
    st.session_state.step = 1
if "runs_root" not in st.session_state:
    st.session_state.runs_root = os.getenv(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)
if "run_dir" not in st.session_state:
    st.session_state.run_dir = None
if "manifest" not in st.session_state:
    st.session_state.manifest = None


# ---------------- Main Navigation ----------------
def main():
    st.set_page_config(page_title="Cold Posterior Lab", layout="centered")

    if st.session_state.step == 1:
        run_select.render()
    elif st.session_state.step == 2:
        report.render()


if __name__ == "__main__":
    main()
