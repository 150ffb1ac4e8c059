"""Shared-attention estimation through group detection.

Modules:

``scene_synth``     synthetic scenes and their JSON-lines storage
``attention_net``   person tokens and individual attention heatmaps
``group_head``      group tokens and the membership matrix
``sa_pipeline``     heatmap aggregation, argmax refinement, group extraction
``train_loss``      Hungarian-matched losses, training loop, checkpoints
``eval_metrics``    GroupIoU / GroupDist, GroupAP and the two baselines
``benchmark``       the pinned desk-scale benchmark
``plotting``        PR curves and scene figures
``cli``             ``python -m sharedattn {generate,train,eval,baseline,plot}``
"""

__version__ = "0.1.0"
