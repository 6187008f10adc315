"""Skeleton action recognition guided by language-model feedback.

A graph-convolutional recognizer reports which classes it confuses; a
language model is asked how those classes differ; the answers come back as
joint-level constraints and text targets for extra training losses.
"""

__version__ = "0.1.0"
