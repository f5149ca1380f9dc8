"""deepkanseg: spline-KAN semantic segmentation on a hand-rolled autodiff tape."""

from . import ops
from .attention import GlobalLocalAttention
from .config import ConfigError, DataConfig, RunConfig, load_config, parse_config
from .data import (CLASS_NAMES, COLOR_MAP, Sample, augment, colorize,
                   normalize_image, read_pgm, read_ppm, sliding_window,
                   synth_generate, write_pgm, write_ppm)
from .decoder import Decoder, GlkanBlock
from .deepkan import DeepKanModule, DeepKanRefiner
from .encoder import Encoder, ResidualStage
from .gradcheck import GradCheckReport, grad_check, run_family_checks
from .kan import KanBlock, KanLayer, KanStack, PlainBlock
from .metrics import (ClassScores, ConfusionMatrix, class_scores,
                      format_report, mean_scores)
from .model import (DeepKanSeg, ModelConfig, load_checkpoint, make_variant,
                    param_count, save_checkpoint)
from .module import (BatchNorm2d, Conv2d, DepthwiseConv2d, LayerNorm, Linear,
                     Module, Sequential)
from .spline import SplineGrid, evaluate_basis
from .tensor import (AutodiffError, Graph, GraphError, NonFiniteError,
                     SerializationError, ShapeError, Tensor, backward,
                     default_dtype, eval_graph, load_tensor, save_tensor,
                     set_default_dtype)
from .train import (SGD, TrainConfig, TrainError, cross_entropy_loss,
                    evaluate_tiles, lr_at_epoch, train_loop)

__version__ = "0.1.0"
