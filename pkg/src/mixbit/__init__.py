"""mixbit: mixed bit-width quantization with gated self-distillation for tiny
convolutional detectors, plus exact BOPs/params/mAP accounting."""

from .bitsearch import (BitPlan, ClusterResult, build_bit_plan,
                        distribution_distance, kmeanspp_cluster,
                        select_bit_width)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config, parse_config
from .costs import CostReport, cost_report, layer_bops, model_params_bytes
from .data import (DetectionDataset, SyntheticScene, gen_synthetic_dataset,
                   load_dataset, save_dataset)
from .detect_eval import (EvalReport, average_precision, evaluate_detections,
                          iou, match_detections, mean_ap)
from .gate import (GateDecision, GateParams, attention_scores, distill_mask,
                   feature_distill_loss, gumbel_binarize, init_gate_params,
                   project_features, total_loss)
from .model import Detector, LayerSpec, NetworkSpec, decode_predictions, default_network
from .quantize import (FULL_PRECISION, QuantizedLayerState,
                       quantize_activations, quantize_uniform,
                       quantize_weights, ste_gradient)
from .tensor import Tensor, cap, clamp01, conv2d, finite_diff_check, gap
from .train import (DivergenceError, SGD, TrainConfig, detection_loss,
                    encode_targets, evaluate_map, sgd_step, train_student_ghost,
                    train_teacher)

__version__ = "0.1.0"
