"""2.5D cross-slice attention segmentation network on a NumPy autodiff core."""
from .errors import (CSANetError, ConfigurationError, ContractError, DimensionError,
                     FormatError, InputError, NumericError)
from .tensor import Tensor, backward, no_grad
from .model import CSANet, CSANetConfig, EncoderConfig, LossWeights, compute_loss, forward, loss_terms
from .data import LabelVolume, SliceTriplet, Volume, generate_synthetic, read_volume, write_volume
from .metrics import Mask, dsc, evaluate_volume, hd95
from .harness import Checkpoint, RunConfig, evaluate, gradcheck, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
