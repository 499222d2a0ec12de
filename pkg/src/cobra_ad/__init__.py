"""Adversarially robust anomaly detection with crafted pseudo-anomalies."""
from .attacks import AttackConfig
from .augment import TransformSpec, default_bank
from .crafter import CrafterConfig, ThresholdModel, craft_batch, craft_pseudo_anomaly, fit_crafter
from .data import ProtocolSpec, load_protocol
from .evalkit import Condition, EvalReport, build_feature_bank, run_protocol
from .losses import PairBatch, cls_loss, cobra_loss, nt_xent, total_loss
from .nets import CobraNet, ModelConfig
from .trainer import TrainConfig, fit

__version__ = "0.1.0"
