"""Longitudinal 3-D volume synthesis at desk scale: a multi-scale residual
vector-quantized autoencoder plus a scale-wise autoregressive transformer,
trained and evaluated on synthetic aging phantoms."""

import os as _os

# VOXAGING_THREADS caps the BLAS thread pool; it must land in the
# environment before numpy first loads, so set it at package import
if "VOXAGING_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["VOXAGING_THREADS"])

from .autodiff import Tensor, backward, no_grad
from .quantize import (Codebook, ScaleSchedule, TokenPyramid, decode_accumulate,
                       encode_multiscale, nearest_code, quantization_loss)
from .vqvae import VQVAE, VQVAEConfig, TrainSettings, train_vqvae, vqvae_loss
from .argen import (AgePair, ARConfig, ARModel, ARSequence, ARTrainSettings,
                    ar_loss, generate, tokenize_pairs, train_ar)
from .phantom import (ScanRecord, SubjectParams, VolumeStore, load_volume,
                      make_dataset, render_volume, save_volume, subject_from_seed)
from .metrics import MetricReport, psnr, ssim3d, wilcoxon_signed_rank
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .optim import Adam, adam_step

__version__ = "0.1.0"
