"""voxelprompt: promptable interactive 3D segmentation at desk scale.

A self-contained training and inference stack for click/box-driven volumetric
segmentation: a float64 autodiff tensor core, rotation-based relative position
encoding, hypersphere-normalized attention, a promptable U-Net, an
orthogonalizing matrix optimizer, interaction simulation, metrics, a synthetic
data pipeline, a training/ablation CLI, and an HTTP inference service.
"""

__version__ = "0.1.0"
