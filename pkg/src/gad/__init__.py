"""Point-cloud classification and segmentation with attention embedding and dual-domain KNN fusion.

Submodules: ``tensor`` (autodiff), ``knn``, ``layers``, ``network``,
``training``, ``data``, ``gradcheck`` and ``cli``. Nothing heavy is imported
here so the CLI can cap thread counts before numpy loads.
"""

__version__ = "0.1.0"
