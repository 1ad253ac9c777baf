import matplotlib.pyplot as plt
import seaborn as sns
import pandas as pd
import logging
logger = logging.getLogger('stylemlm')


def plot_sweep(curve, axs=None, colors=None, lw=1, ls='solid', marker='o', **axparams):
    '''Depicts the effect of lambda_eps on the style masked sentences.

    Left panel: s-BLEU of the masked sentences against the sources; right panel: classifier accuracy.

    :param curve: A SweepCurve, as returned by evaluation.lambda_sweep, or its DataFrame (SweepCurve.to_frame()).
        A dict of curves plots one line per key (e.g. per attribution method).
    :param axs: Two axes for the plot. If omitted, a new figure is created.
    :param colors: Provide a dictionary with curve keys and color values. By default, colors are automatically assigned.
    :param lw: Specify width of the lines. See matplotlib Line2D for details.
    :param ls: Specify style of the lines. See matplotlib Line2D for details.
    :param marker: Marker of the grid points.
    :param \\**axparams: Additional keyword parameters are passed to ax.set() of both axes.
    :return: figure and axes'''
    curves = curve if isinstance(curve, dict) else {None: curve}
    if axs is None:
        f, axs = plt.subplots(1, 2, figsize=(10, 4))
    else:
        f = axs[0].figure
    if colors is None:
        colors = {k: f'C{i}' for i, k in enumerate(curves)}
    for key, c in curves.items():
        df = c if isinstance(c, pd.DataFrame) else c.to_frame()
        for ax, col in zip(axs, ('s_bleu_masked', 'acc_percent')):
            ax.plot(df['lambda_eps'], df[col], color=colors[key], lw=lw, ls=ls, marker=marker, label=key)
    axs[0].set(xlabel=r'$\lambda_\epsilon$', ylabel='s-BLEU', **axparams)
    axs[1].set(xlabel=r'$\lambda_\epsilon$', ylabel='Accuracy %', **axparams)
    if None not in curves:
        axs[1].legend()
    sns.despine(fig=f)
    return f, axs


def plot_mask_quality(table, ax=None, columns=('Accuracy%', 's-BLEU'), legend=True, annotate=True, bar_width=.8, palette=None, **axparams):
    '''Depicts the masking quality of the attribution methods as grouped bars.

    This function is intended to be called with the result from evaluation.mask_quality_table().

    :param table: Pandas dataframe with methods as index.
    :param ax: the axis for the plot.
    :param columns: The metrics to depict.
    :param legend: If True, add a legend.
    :param annotate: If True, print the values on top of the bars.
    :param bar_width: Set relative width of the plotted bars.
    :param palette: Seaborn palette for the metrics.
    :param \\**axparams: Additional keyword parameters are passed to ax.set().
    :return: the axis'''
    if ax is None:
        _, ax = plt.subplots()
    long = table[list(columns)].rename_axis('method').reset_index().melt(id_vars='method', var_name='metric', value_name='value')
    sns.barplot(data=long, x='method', y='value', hue='metric', ax=ax, width=bar_width, palette=palette)
    if annotate:
        for container in ax.containers:
            ax.bar_label(container, fmt='%.1f', fontsize='small')
    if legend:
        ax.legend(title=None)
    elif ax.get_legend() is not None:
        ax.get_legend().remove()
    ax.set(xlabel='', ylabel='%', **axparams)
    return ax
