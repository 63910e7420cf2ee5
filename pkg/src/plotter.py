from typing import List, Optional
import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from src import PROJECT_PATH
from src.json_helper import JsonHelper

logger = logging.getLogger(__name__)


class Plotter:
    """This class is responsible for our plotting needs.

    It renders the training traces a run leaves in its folder: the BDE loss (with the held-out kNN accuracy when
    model selection was on) and the meta-training loss and accuracies.
    """
    def __init__(self, folder_name: str) -> None:
        """
        Constructor for Plotter class

        :param str folder_name: The run directory, relative to the project or absolute
        """
        self.folder_name = os.path.join(PROJECT_PATH, folder_name)

    def read_trace(self, *parts: str) -> Optional[List[dict]]:
        path = os.path.join(self.folder_name, *parts)
        if not os.path.exists(path):
            return None
        return JsonHelper.read(path, log=False)['trace']

    def plot_traces(self, filename: str = 'traces.pdf') -> str:
        """
        Plots every available trace of the run into one figure and saves it into the run directory

        :param str filename: Name of the figure file
        :return str: The path of the saved figure
        """
        bde_trace = self.read_trace('bde', 'loss_trace.json')
        meta_trace = self.read_trace('meta', 'trace.json')
        panels = [t for t in (bde_trace, meta_trace) if t is not None]
        if not panels:
            raise FileNotFoundError(f'no traces under {self.folder_name}')

        fig, axes = plt.subplots(1, len(panels), figsize=(7 * len(panels), 5), squeeze=False)
        axes = axes[0]
        i = 0
        if bde_trace is not None:
            Plotter.plot_panel(ax=axes[i], trace=bde_trace, title='BDE', accuracy_keys=['holdout_knn_accuracy'])
            i += 1
        if meta_trace is not None:
            Plotter.plot_panel(ax=axes[i], trace=meta_trace, title='meta-training',
                               accuracy_keys=['train_accuracy', 'val_accuracy'])

        path = os.path.join(self.folder_name, filename)
        plt.savefig(path, bbox_inches='tight')
        plt.close(fig)
        logger.info('Traces plotted to %s', path)
        return path

    @staticmethod
    def plot_panel(ax: plt.Axes, trace: List[dict], title: str, accuracy_keys: List[str]) -> None:
        """
        Loss on the left axis, accuracies in [0, 1] on a twin right axis

        :param plt.Axes ax: The axis to draw on
        :param List[dict] trace: Per-epoch entries with 'epoch' and 'loss'
        :param str title: Panel title
        :param List[str] accuracy_keys: Trace keys plotted as accuracies when present
        :return:
        """
        epochs = [entry['epoch'] for entry in trace]
        ax.plot(epochs, [entry['loss'] for entry in trace], color='tab:blue', label='loss')
        ax.set_xlabel('epoch')
        ax.set_ylabel('loss')
        ax.set_title(title)

        twin = ax.twinx()
        for key, color in zip(accuracy_keys, ('tab:orange', 'tab:green')):
            points = [(entry['epoch'], entry[key]) for entry in trace if entry.get(key) is not None]
            if points:
                twin.plot(*zip(*points), color=color, marker='.', label=key)
        twin.set_ylim(0.0, 1.0)
        twin.set_ylabel('accuracy')

        handles, labels = ax.get_legend_handles_labels()
        twin_handles, twin_labels = twin.get_legend_handles_labels()
        ax.legend(handles + twin_handles, labels + twin_labels, loc='center right')
