"""
AlignDiff Library
"""

from .AlignDiff import AlignDiff
from .corpus import generate_corpus, read_dataset, write_dataset
from .metrics import evaluate_sets
from .trainer import TrainConfig, load_config

if __name__ == "__main__":  # pragma: no cover
    print(type(AlignDiff), type(generate_corpus), type(evaluate_sets))
