"""Embedding extraction frontend for the concept-bottleneck pipeline: encodes
images and descriptor texts into the CLEB binary format plus the dataset
manifest JSON, and renders t-SNE views of descriptor pools."""

__version__ = "0.1.0"
