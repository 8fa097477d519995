import plotly.graph_objects as go

from learncore import schedule_rows


def pr_curve_figure(curve, title="Precision / recall"):
    recall = [r for r, _ in curve]
    precision = [p for _, p in curve]
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=recall, y=precision, mode='lines', name='PR curve'))
    fig.add_hline(y=0.9, line_dash='dash', annotation_text='P = 0.90')
    fig.update_layout(title=title, xaxis_title='Recall', yaxis_title='Precision',
                      xaxis_range=[0, 1], yaxis_range=[0, 1.05])
    return fig


def schedule_figure(cfg=None, base_lr=None):
    rows = schedule_rows(cfg) if base_lr is None else schedule_rows(cfg, base_lr)
    epochs = [e for e, _, _ in rows]
    fig = go.Figure()
    fig.add_trace(go.Scatter(x=epochs, y=[r for _, r, _ in rows], mode='lines+markers', name='LR ratio'))
    fig.update_layout(title='Learning-rate ratio per epoch', xaxis_title='Epoch', yaxis_title='Ratio')
    return fig


def patches_figure(img, patches):
    """The image with one outlined box per patch."""
    fig = go.Figure(go.Image(z=img.data))
    for p in patches:
        b = p.box
        fig.add_shape(type='rect', x0=b.x, y0=b.y, x1=b.x + b.w, y1=b.y + b.h, line=dict(width=1))
        fig.add_annotation(x=b.x, y=b.y, text=p.patch_id, showarrow=False, xanchor='left', yanchor='top',
                           font=dict(size=9))
    fig.update_layout(title=f'{len(patches)} patches', margin=dict(l=0, r=0, t=40, b=0))
    return fig


def ablation_figure(results):
    """Bar chart of uAP per matching mode from a run_ablation frame."""
    fig = go.Figure(data=[go.Bar(x=results['mode'], y=results['uAP'], name='uAP')])
    fig.update_layout(title='Matching-mode ablation', xaxis_title='Mode', yaxis_title='uAP', yaxis_range=[0, 1])
    return fig
