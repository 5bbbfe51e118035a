"""Stand-alone inter-frame attention: locally deformable cross-frame
attention guided by a motion saliency map, with brute-force oracles,
finite-difference-verified gradients, and a synthetic-motion training demo.
"""

from .tensor import (Tensor, Conv2dParams, FormatError, ShapeError, zeros,
                     zeros_like, elementwise, add, sub, mul, sigmoid, dot,
                     conv2d, save_tensor, load_tensor, dump_tensor, parse_tensor)
from .deform import (MotionSaliencyMap, OffsetField, NeighborSet,
                     temporal_difference, motion_saliency, estimate_offsets,
                     bilinear_sample, extract_neighbors, grid_points)
from .attention import (AttentionWeights, QueryResult, correlate, normalize,
                        aggregate, enhance, attend_query)
from .blocks import (SifaConfig, BlockParams, AffineParams, DemoNet,
                     DemoNetConfig, sifa_block_forward, sifa_c_forward,
                     sifa_star_forward, block_forward, temporal_conv_baseline,
                     demo_net_forward, flop_count, init_demo_net,
                     make_block_params, net_parameters, save_net, load_net)
from .autodiff import (Tape, Var, GradReport, backward, finite_diff_check,
                       render_report_table, write_report_csv)
from .oracle import OpCounter, oracle_forward
from .dataset import (DIRECTIONS, SyntheticClipSpec, DatasetSpec, gen_dataset,
                      load_split, sample_clip, render_clip)
from .training import TrainConfig, TrainResult, TrainingDiverged, train, evaluate
from .export import export_attention, write_pgm, read_pgm

__version__ = "0.1.0"
