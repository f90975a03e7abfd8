"""Plant disease-severity scoring with label-distribution vision transformers.

Submodules: ``envmodel`` (GDD/NPG thermal time), ``imaging`` (normalization,
augmentation), ``labeldist`` (label spaces, losses, metrics), ``model`` (ViT
with per-label heads, checkpoints, attention rollout), ``training``,
``inference``, ``synthdata``, ``config``, ``plots`` and ``cli``.
"""

__version__ = "0.1.0"
