"""Adversarial visual prompting for frozen image classifiers.

Train universal or class-wise additive input prompts that robustify a fixed,
pre-trained classifier at test time, attack them with PGD under several
threat models, and evaluate standard/robust accuracy, prompt selection, and
inference overhead.
"""

from .attack import AttackSpec, pgd_attack, pgd_attack_true_class
from .container import load_container, save_container
from .core import (ClassifierHandle, ClassPromptSet, DatasetSplit,
                   LabeledImageBatch, PromptTemplate, ShapeMismatchError,
                   apply_prompt, frame_mask, full_mask_width, project_prompt,
                   prompt_images, split_by_class)
from .data import (load_cifar10_batches, load_tensor_dir, save_tensor_dir,
                   synthetic_pattern_split)
from .evaluation import (EvalReport, TimingReport, benchmark_inference,
                         build_report, confusion_matrix, evaluate_robust,
                         evaluate_standard, render_accuracy_table,
                         render_ablation_table, run_ablation)
from .objectives import (ABLATION_SETTINGS, LossConfig, adv_loss, cavp_loss1,
                         cavp_loss2, cavp_loss3, cavp_total, cavp_v0_objective,
                         uavp_objective, vp_loss)
from .selection import (prompted_predict, prompted_predict_universal,
                        select_prompt, stacked_prompted_confidences)
from .training import MODES, TrainConfig, TrainHistory, lr_at, train_prompts
from .zoo import (ModelSpec, ResNet18, TinyCNN, clean_accuracy,
                  load_checkpoint, save_checkpoint, train_base_classifier)

__version__ = "0.1.0"
