# vim: ai:sw=4:ts=4:sta:et:fo=croql
"""
Lightweight video frame interpolation: a shared inter-frame feature pyramid, a
coarse-to-fine flow estimator with large-kernel depth-wise separable decoders and a
decoder-only refinement network, plus training, evaluation and analytic cost tooling.
"""
from ladder_vfi.config import ModelConfig, TrainConfig, large_config, small_config
from ladder_vfi.cost_model import count_flops, count_params
from ladder_vfi.model import LadderModel
from ladder_vfi.synthesis import FlowMode, interpolate
