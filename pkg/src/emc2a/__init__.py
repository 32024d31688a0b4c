"""EMC2A-Net: multibranch dilated residual CNN with cross-channel attention, in numpy."""

__version__ = "0.1.0"

_LAZY = {
    "Tensor": "tensor", "backward": "tensor", "no_grad": "tensor", "precision": "tensor",
    "finite_diff_check": "tensor", "set_default_dtype": "tensor",
    "NetConfig": "net", "StageConfig": "blocks", "build": "net", "count_parameters": "net",
    "TrainConfig": "training", "train": "training", "cosine_lr": "training",
    "synth_dataset": "data", "load_manifest": "data", "evaluate": "metrics",
    "BACKEND": "kernels",
}


def __getattr__(name):
    if name in _LAZY:
        import importlib
        return getattr(importlib.import_module(f".{_LAZY[name]}", __name__), name)
    raise AttributeError(name)
