"""The four surface regression architectures."""

from . import cnn3d, gcn, meshcnn, pointnet

__all__ = ["cnn3d", "gcn", "meshcnn", "pointnet"]
