"""ASR-error-robust utterance classification at desk scale.

Contrastive pre-training on paired clean/noisy transcripts, fine-tuning with
supervised contrastive learning and self-distillation, a synthetic ASR-noise
channel, and a WER-bucketed evaluation harness, all on a small from-scratch
transformer with a gradient-checked autodiff core.
"""

from .corpus import (LabelMap, NoiseConfig, PairedExample, WerBuckets, bucketize,
                     load_pairs, synthesize_noise, wer)
from .encoder import EncoderConfig, Model, classify, encode_batch, mlm_logits
from .evalcli import EvalReport, cli, evaluate, joint_accuracy
from .losses import (ContrastiveBatch, LabeledBatch, LossWeights, l_c, l_ce_multihead,
                     l_d, l_ft, l_hard, l_mlm, l_pt, l_soft)
from .textproc import TokenSeq, Vocab, apply_mlm_mask, build_vocab, encode
from .trainer import (PredictionCache, TrainingConfig, finetune, init_cache,
                      pretrain, snapshot_predictions)

__version__ = "0.1.0"
