"""compnet: a compositional training objective for small CNNs.

Masked weight-sharing branches, mask-projected penalty losses, a
synthetic masked-digit dataset generator, and an evaluation suite
(top-k accuracy, average precision, guided-backprop localization),
all on a self-contained float64 tape-autodiff core.
"""

from .data import (ContextSets, Sample, SynthConfig, load_dataset, load_idx,
                   make_context_sets, save_dataset, synth_multi, synth_single)
from .kernels import (affine, avg_downsample, conv2d, elementwise_mul,
                      flatten_features, maxpool2d, relu)
from .masks import (LossMask, build_loss_mask, compositionality_residual,
                    project_mask)
from .metrics import (EvalReport, activation_shift, average_precision,
                      guided_backprop, localization_accuracy, stratify_by_area,
                      topk_accuracy)
from .network import (Activations, NetworkSpec, dropout, forward, init_params,
                      l2_penalty, make_cnn_spec, mnist_network_spec,
                      predict_logits, sigmoid_cross_entropy,
                      softmax_cross_entropy, toy_network_spec)
from .objective import (LossBreakdown, LossConfig, VARIANTS, baseline_aug_batch,
                        build_step_graph, compositional_loss,
                        discriminative_loss, two_branch_step)
from .optim import AdamState, adam_step, init_adam
from .tape import Parameter, Tape, backward, gradient_check
from .train import (ExperimentConfig, RunRecord, evaluate_model, evaluate_run,
                    load_checkpoint, parse_config, save_checkpoint, train_run)

__version__ = "0.1.0"
