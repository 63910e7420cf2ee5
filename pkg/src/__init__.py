"""Few-shot learning from coarse labels: BDE embedding, C2F pseudo-labeling and prototypical meta-learning."""
import os

__version__ = '0.1.0'

# run directories and relative dataset paths resolve against the repository root
PROJECT_PATH = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
