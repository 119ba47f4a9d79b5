"""Mesh-based densification of visible object surfaces."""

from .forward import (ClusterAssignment, ForwardParams, aggregation_forward, build_clusters,
                      graph_conv_forward, gnn_stack_forward, stage_forward)
from .losses import mesh_energy, mesh_loss_gradient, mesh_losses
from .mesh import (PixelMesh, StageHierarchy, build_pixel_mesh, build_stage_hierarchy, triangulate,
                   upsample_stage)
from .optimize import DivergenceError, deform_optimize

__all__ = [
    "ClusterAssignment", "ForwardParams", "aggregation_forward", "build_clusters", "graph_conv_forward",
    "gnn_stack_forward", "stage_forward", "mesh_energy", "mesh_loss_gradient", "mesh_losses", "PixelMesh",
    "StageHierarchy", "build_pixel_mesh", "build_stage_hierarchy", "triangulate", "upsample_stage",
    "DivergenceError", "deform_optimize",
]
