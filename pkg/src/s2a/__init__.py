"""Two-stream hyperspectral object detection at desk scale.

Modules: ``cube_io`` (cube files, images), ``hid`` (band selection, PCA,
aggregated images), ``tensor`` (autodiff), ``ssa`` (aggregation block),
``detector`` (backbone, head, loss, training), ``evaluation`` (AP/mAP),
``synthetic`` (scene generator), ``pipeline``/``cli`` (the ``s2a`` tool).
"""

__version__ = "0.1.0"
