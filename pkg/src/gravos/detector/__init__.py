from .graph import build_graph, graph_point_gradients
from .io import load_snapshot, save_snapshot, write_loss_curve
from .model import (ArchConfig, Batch, DetectorParams, DetectorSnapshot, Prediction,
                    classification_loss, decode_box, encode_target, encode_voxel, forward_pass,
                    init_params, location_input_gradients, location_loss, loss_and_grads,
                    prepare_batch)
from .train import DivergenceError, TrainConfig, detect, fit, infer, pretrain, train

__all__ = [
    "ArchConfig", "Batch", "DetectorParams", "DetectorSnapshot", "DivergenceError", "Prediction",
    "TrainConfig", "build_graph", "classification_loss", "decode_box", "detect", "encode_target",
    "encode_voxel", "fit", "forward_pass", "graph_point_gradients", "infer", "init_params",
    "load_snapshot", "location_input_gradients", "location_loss", "loss_and_grads", "prepare_batch",
    "pretrain", "save_snapshot", "train", "write_loss_curve",
]
