"""Image captioning and anomaly classification toolkit.

A dense-feature LSTM caption decoder with a parallel MLP anomaly
classifier, a reference unigram-alignment caption metric, dataset and
checkpoint formats, and a CLI tying them together.
"""

__version__ = "0.1.0"
