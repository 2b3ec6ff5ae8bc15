"""Multimodal multitask pretraining for polymer property prediction.

A sequence encoder reads P-SMILES tokens, a structure encoder reads 3D
conformers of the repeating unit, and both are pretrained jointly with masked
token prediction, coordinate denoising and a contrastive alignment loss before
being fine-tuned for property regression.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .conformer import Conformer, add_virtual_atom, chain_embed, inject_noise, load_conformers
from .finetune import FinetuneConfig, ModalityChoice, PropertyDataset, r_squared, rmse, run_cross_validation
from .pretrain import PretrainConfig, TaskToggles, run_pretraining
from .psmiles import StarStrategy, Vocabulary, build_vocabulary, detokenize, parse, tokenize, transform_stars
from .seq_encoder import SeqConfig
from .struct_encoder import StructConfig

__version__ = "0.1.0"

__all__ = [
    "Conformer", "FinetuneConfig", "ModalityChoice", "PretrainConfig", "PropertyDataset", "SeqConfig",
    "StarStrategy", "StructConfig", "TaskToggles", "Vocabulary", "add_virtual_atom", "build_vocabulary",
    "chain_embed", "detokenize", "inject_noise", "load_checkpoint", "load_conformers", "parse", "r_squared",
    "rmse", "run_cross_validation", "run_pretraining", "save_checkpoint", "tokenize", "transform_stars",
]
