"""Multi-modal deep transformation models with ensemble explanations.

Modules: ``engine`` (tensors and reverse-mode gradients for a small 3D CNN),
``dtm`` (transformation models), ``training``, ``evaluation``, ``crossval``,
``xai`` (Grad-CAM and occlusion), ``embedding`` (t-SNE) and ``data``.
"""

__version__ = "0.1.0"
