"""storysynth: retrieval-augmented, structure-guided sprite-video synthesis."""

__version__ = "0.1.0"
