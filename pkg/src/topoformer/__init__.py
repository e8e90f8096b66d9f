"""TopoFormer: transformer/ConvLSTM beach-profile completion on a small numpy autodiff core."""

from .autograd import Tape, Tensor, grad_check, no_grad
from .data import NormStats, RawProfile, ResampledProfile, SiteDatums, preprocess, resample, split
from .metrics import evaluate_models, evaluate_ood, mae, mape, rmse
from .models import TopoFormerConfig, build_baseline, build_model, build_topoformer, count_params
from .training import Adam, TrainConfig, fit

__version__ = "0.1.0"
