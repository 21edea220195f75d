"""Multimodal audio-visual stroke screening pipeline.

Library layout:

- ``nncore``      differentiable layer stack, SGD, checkpoint format
- ``faceprop``    pose-gated facial frame sequence proposal
- ``audiospec``   log-Mel spectrogram images from speech recordings
- ``model``       dual-branch lateral-fusion encoder + subject discriminator
- ``training``    losses, adversarial pair sampling, alternating updates
- ``evaluation``  case aggregation, metrics, CV / holdout protocols
- ``synthbench``  synthetic multimodal case generator and probes
- ``cli``         batch orchestration (``strokescreen`` console script)
"""

__version__ = "0.1.0"
