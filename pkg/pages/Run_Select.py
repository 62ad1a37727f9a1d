"""
Page 1: pick a finished run
"""
from pathlib import Path

import streamlit as st

from experiment_runner import MANIFEST_NAME, RunManifest


def find_runs(root):
    """Directories under root (root included) that hold a manifest"""
    root = Path(root)
    if not root.exists():
        return []
    return sorted(p.parent for p in root.rglob(MANIFEST_NAME))


def render():
    st.title("🧊 Cold Posterior Lab")
    st.markdown("Browse the temperature sweeps of finished runs.")

    root = st.text_input("Runs directory", value=st.session_state.runs_root)
    st.session_state.runs_root = root
    runs = find_runs(root)
    if not runs:
        st.info(f"No {MANIFEST_NAME} found under {root}. Start a run with `python cli.py run <config.json>`.")
        return

    choice = st.selectbox("Run", [str(p) for p in runs])
    if st.button("Open run ➡️", use_container_width=True):
        try:
            st.session_state.manifest = RunManifest.load(choice)
            st.session_state.run_dir = choice
            st.session_state.step = 2
            st.rerun()
        except (OSError, ValueError) as e:
            st.error(f"Cannot read manifest: {e}")
