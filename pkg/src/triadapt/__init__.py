"""3D-aware tri-plane GAN adaptation to stylized domains with geometric priors."""
from .camera import CameraConfig, CameraPose, PosePrior, generate_rays
from .config import RunConfig
from .generator import TriPlaneGenerator
from .losses import LossWeights, PoseConditionedDiscriminator
from .pose import PoseNet, PoseRegressor
from .triplane import FieldDecoder, TriPlane

__version__ = "0.1.0"

__all__ = ["CameraConfig", "CameraPose", "PosePrior", "generate_rays", "RunConfig", "TriPlaneGenerator",
           "LossWeights", "PoseConditionedDiscriminator", "PoseNet", "PoseRegressor", "FieldDecoder",
           "TriPlane"]
