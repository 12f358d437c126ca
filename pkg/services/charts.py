"""
Charts
Plotly HTML charts for training curves, per-domain mIoU and ablation tables
"""

from pathlib import Path
from typing import Union

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

PathLike = Union[str, Path]

PLOTLY_LAYOUT = {
    'plot_bgcolor': 'rgba(0,0,0,0)',
    'paper_bgcolor': 'white',
    'font': {'color': '#2c3e50', 'family': 'Inter, sans-serif'},
    'xaxis': {'gridcolor': '#ecf0f1', 'linecolor': '#bdc3c7'},
    'yaxis': {'gridcolor': '#ecf0f1', 'linecolor': '#bdc3c7'},
    'height': 400,
}

LOSS_COLORS = {
    'total': '#2c3e50',
    'ce': '#3498db',
    'adv': '#E74C3C',
    'cont': '#27AE60',
    'ortho': '#F39C12',
    'disc_real': '#8e44ad',
    'disc_fake': '#6B1AC7',
}


def _write(fig: go.Figure, path: PathLike, div_id: str) -> Path:
    # fixed div id keeps reruns byte-identical
    fig.write_html(str(path), include_plotlyjs='cdn', full_html=True, div_id=div_id)
    return Path(path)


def loss_curves(metrics: pd.DataFrame, path: PathLike) -> Path:
    """One line per loss component over epochs"""
    columns = [name for name in LOSS_COLORS if name in metrics.columns]
    long = metrics.melt(id_vars='epoch', value_vars=columns, var_name='loss', value_name='value')
    fig = px.line(long, x='epoch', y='value', color='loss', markers=True, color_discrete_map=LOSS_COLORS)
    fig.update_layout(**PLOTLY_LAYOUT, title={'text': 'Training losses', 'font': {'size': 16}})
    return _write(fig, path, 'dcdnet-losses')


def domain_miou(summary: pd.DataFrame, path: PathLike) -> Path:
    """Grouped bars of mIoU per target domain, one group per shot count"""
    frame = summary.assign(k_shots=summary['k_shots'].astype(str) + '-shot',
                           domain_id=summary['domain_id'].astype(str))
    fig = px.bar(frame, x='domain_id', y='miou', color='k_shots', barmode='group',
                 color_discrete_sequence=['#3498db', '#6B1AC7'])
    fig.update_layout(**PLOTLY_LAYOUT, title={'text': 'Target mIoU per domain', 'font': {'size': 16}})
    fig.update_yaxes(range=[0, 1])
    return _write(fig, path, 'dcdnet-domain-miou')


def ablation_bars(table: pd.DataFrame, path: PathLike) -> Path:
    """Desk-scale mIoU per ablation row, faceted by table"""
    fig = px.bar(table, x='configuration', y='miou', facet_col='table', color='table',
                 color_discrete_sequence=['#3498db', '#27AE60', '#F39C12'])
    fig.update_xaxes(matches=None)
    fig.update_layout(**PLOTLY_LAYOUT, showlegend=False, title={'text': 'Ablation (mean over seeds)', 'font': {'size': 16}})
    return _write(fig, path, 'dcdnet-ablation')
