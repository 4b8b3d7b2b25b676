from .cnn import (CnnModel, CnnSpec, TrainConfig, accuracy, backward, forward, load_model,
                  model_from_bytes, model_to_bytes, save_model, sgdm_step, train)
from .knn import KnnClassifier, knn_classify

__all__ = ["CnnModel", "CnnSpec", "TrainConfig", "accuracy", "backward", "forward", "load_model",
           "model_from_bytes", "model_to_bytes", "save_model", "sgdm_step", "train",
           "KnnClassifier", "knn_classify"]
