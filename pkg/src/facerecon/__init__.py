"""Single-image 3D face reconstruction: morphable model, differentiable
rendering, attention regressor, training losses and evaluation metrics."""

from .camera import CameraModel, Pose, euler_to_rotation, project_landmarks, transform_and_project
from .coefficients import CoefficientVector, concat_coefficients, split_coefficients
from .illumination import compute_vertex_normals, sh_basis, shade_texture
from .losses import LossBreakdown, LossWeights, total_loss
from .morphable_model import (MorphableModel, decode_shape, decode_texture, load_model, save_model,
                              select_landmarks, synthesize_toy_model)
from .network import FaceRegressor, NetworkConfig, feature_activation_maps
from .pipeline import SceneConfig, reconstruct
from .renderer import RenderOutput, rasterize, render, render_backward

__version__ = "0.1.0"
