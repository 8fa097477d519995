import io

import pandas as pd
import streamlit as st
from PIL import Image, UnidentifiedImageError

from charts import patches_figure, pr_curve_figure, schedule_figure
from config import load_config
from core import D2lvError, ImageBuffer, read_ground_truth, read_pairs
from evaluation import GroundTruth, RankedPairList, dedupe_best, micro_ap, pr_curve, recall_at_precision
from learncore import schedule_rows
from patches import build_detector, parse_plan, query_patches, reference_patches

st.set_page_config(page_title="D2LV Copy Detection", page_icon="🔍", layout="wide")


def evaluation_page():
    st.header("Evaluate a submission")
    pairs_file = st.file_uploader("Pairs CSV (query_id,reference_id,score)", type="csv")
    gt_file = st.file_uploader("Ground truth CSV (query_id,reference_id)", type="csv")
    total = st.number_input("Total positives (0 = count the ground truth)", min_value=0, value=0, step=1)
    if not (pairs_file and gt_file):
        st.info("Upload both files to compute uAP.")
        return
    try:
        ranked = RankedPairList.from_scores(dedupe_best(read_pairs(pairs_file)))
        gt = GroundTruth.from_pairs(read_ground_truth(gt_file), total or None)
        curve = pr_curve(ranked, gt)
    except D2lvError as e:
        st.error(f"Could not evaluate: {e}")
        return
    col1, col2, col3 = st.columns(3)
    col1.metric("uAP", f"{micro_ap(ranked, gt):.6f}")
    col2.metric("R@P90", f"{recall_at_precision(ranked, gt):.6f}")
    col3.metric("Pairs", len(ranked))
    st.plotly_chart(pr_curve_figure(curve), use_container_width=True)
    st.dataframe(ranked.to_frame().head(100))


def patches_page(cfg):
    st.header("Patch plans")
    upload = st.file_uploader("Image", type=["png", "jpg", "jpeg", "ppm", "bmp"])
    role = st.radio("Role", ["reference", "query"], horizontal=True)
    if not upload:
        return
    try:
        img = ImageBuffer.from_pil(Image.open(io.BytesIO(upload.getvalue())))
        if role == "reference":
            patches = reference_patches(img, parse_plan("reference", cfg.patches.reference_plan), cfg.patches)
        else:
            plan = parse_plan("query", cfg.patches.query_plan)
            patches = query_patches(img, plan, build_detector(cfg.patches), cfg.patches)
    except (UnidentifiedImageError, D2lvError) as e:
        st.error(f"Could not build patches: {e}")
        return
    st.plotly_chart(patches_figure(img, patches), use_container_width=True)
    st.dataframe(pd.DataFrame([(p.patch_id, p.box.x, p.box.y, p.box.w, p.box.h) for p in patches],
                              columns=["patch", "x", "y", "w", "h"]))


def schedule_page():
    st.header("Learning-rate schedule")
    base_lr = st.number_input("Base learning rate", value=3.5e-4, format="%.6f")
    st.plotly_chart(schedule_figure(base_lr=base_lr), use_container_width=True)
    st.dataframe(pd.DataFrame(schedule_rows(base_lr=base_lr), columns=["epoch", "ratio", "lr"]))


def main():
    cfg = load_config()
    with st.sidebar:
        st.title('🔍 Copy Detection')
        selected = st.selectbox("Choose a page", ["Evaluation", "Patches", "Schedule"])

    if selected == "Evaluation":
        evaluation_page()
    elif selected == "Patches":
        patches_page(cfg)
    elif selected == "Schedule":
        schedule_page()


if __name__ == "__main__":
    main()
