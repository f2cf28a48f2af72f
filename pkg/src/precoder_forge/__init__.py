"""Spectral-efficiency precoding: L-BFGS optimization and VAE/CVAE samplers."""

__version__ = "0.1.0"

from .channel import PerturbationSpec, generate_channel, perturb_channel
from .se import (SystemConfig, antenna_powers, mrt_precoder, project_power, se_gradient, sinr,
                 spectral_efficiency, zf_precoder)
from .lbfgs import LbfgsConfig, OptimizeResult, multi_start, optimize
from .dataset import (PrecodingDataset, build_fixed_h_dataset, build_perturbed_dataset, load, pack,
                      save, unpack)
from .models import (GenerativeModel, TrainConfig, make_cvae, make_vae, reconstruct, sample_cvae,
                     sample_vae, train)
