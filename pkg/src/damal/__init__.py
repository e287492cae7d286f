"""3D brain-tissue segmentation with spatial/channel attention and a surface-weighted attention loss."""

from .distance import compute_all_weight_maps, compute_weight_map, distance_transform, extract_surface
from .losses import (attention_loss, combined_loss, cross_entropy, dice_loss, focal_loss,
                     gradient_crossover)
from .metrics import asd, dsc, evaluate_subject
from .network import DAMNet, NetworkConfig, build_model, count_parameters
from .pipeline import TrainConfig, sliding_window_predict, train, warm_restart_lr
from .volume import (LabelVolume, PhantomSpec, SubjectRecord, Volume, generate_phantom,
                     load_subject, normalize_intensity, sample_patch, save_subject)

__version__ = "0.1.0"
