"""Recurrent autoregressive diffusion for video at desk scale.

A factorized diffusion transformer (spatial then temporal attention) whose
layers each carry a recurrent memory block (LSTM, selective SSM or
TTT-linear), trained with per-frame noise levels in a chunk-wise or a
frame-wise autoregressive paradigm.
"""

from .diffusion import NoiseSchedule, build_schedule, ddim_step, ddpm_step, forward_diffuse, masked_mse
from .inference import rollout, rollout_chunkwise, rollout_framewise, split_context
from .mazeworld import MazeSpec, generate_dataset, generate_episode, read_dataset, write_dataset
from .memory import LSTMBlock, SSMBlock, TTTBlock, lstm_step, recurrent_scan, ssm_step, ttt_step
from .metrics import per_frame_curves, psnr, ssim
from .model import HiddenStateBank, RadConfig, RadModel, count_params, load_model, param_formula, save_checkpoint
from .nn import ConfigError
from .training import TrainConfig, WindowSpec, optimize, prefetch_hidden_states, train_step

__version__ = "0.1.0"
