"""Built-in model builders and the frozen ``bench`` preset.

The bench preset freezes the desk-scale benchmark shape as executable
defaults: 30 clients, 480 train / 160 balanced test samples each, K=5,
lr=0.01, 10 classes, a 500-sample balanced shared set, strong label skew
plus per-client feature shift on a frozen seed, and all five strategies.
"""

from __future__ import annotations

from .nn import Conv3x3, Dense, Flatten, MaxPool2x2, ModelSpec, ReLU, Softmax


def mlp_spec(input_dim: int, hidden: tuple[int, ...] = (400, 100), num_classes: int = 10) -> ModelSpec:
    """Fully-connected stack: input -> hidden... -> num_classes with Softmax."""
    layers = []
    prev = input_dim
    for width in hidden:
        layers += [Dense(prev, width), ReLU()]
        prev = width
    layers += [Dense(prev, num_classes), Softmax()]
    return ModelSpec(layers=tuple(layers), input_shape=(input_dim,), num_classes=num_classes)


def three_nn_spec(input_dim: int = 1200, num_classes: int = 10) -> ModelSpec:
    """The 400/100/10 three-layer perceptron (521,510 params at dim 1200)."""
    return mlp_spec(input_dim, hidden=(400, 100), num_classes=num_classes)


def cnn_spec(
    input_shape: tuple[int, int, int] = (1, 20, 20),
    conv_channels: tuple[int, int, int] = (32, 16, 8),
    dense_units: int = 128,
    num_classes: int = 10,
) -> ModelSpec:
    """Three 3x3 convs (pooling after the first two), dense head, Softmax.

    ReLU follows each conv and the dense head; (1, 20, 20) is the smallest
    square single-channel input the stack is shape-valid on.
    """
    c0, c1, c2 = conv_channels
    ch, h, w = input_shape
    layers = [
        Conv3x3(ch, c0),
        ReLU(),
        MaxPool2x2(),
        Conv3x3(c0, c1),
        ReLU(),
        MaxPool2x2(),
        Conv3x3(c1, c2),
        ReLU(),
        Flatten(),
    ]
    flat = c2 * ((((h - 2) // 2) - 2) // 2 - 2) * ((((w - 2) // 2) - 2) // 2 - 2)
    layers += [Dense(flat, dense_units), ReLU(), Dense(dense_units, num_classes), Softmax()]
    return ModelSpec(layers=tuple(layers), input_shape=input_shape, num_classes=num_classes)


BENCH_SEED = 20240 ** 2 % 1_000_003  # frozen arbitrary master seed


def bench_config() -> dict:
    """Raw config dict for the frozen benchmark preset."""
    from .nn import spec_to_dict

    return {
        "schema": "perfed/v1",
        "seed": BENCH_SEED,
        "out_dir": "runs/bench",
        "repeats": 5,
        "rounds": 40,
        "data": {
            "source": "synthetic",
            "num_classes": 10,
            "feature_dim": 64,
            "samples_per_class": 3000,
            "noise_sigma": 0.25,
        },
        "partition": {
            "num_clients": 30,
            "train_per_client": 480,
            "test_per_client": 160,
            "skew": "random-counts",
            "client_shift": 1.2,
        },
        "shared_set": {"size": 500, "balanced": True},
        "data_sharing_fraction": 0.0,
        "model": spec_to_dict(mlp_spec(64)),
        "round": {"k": 5, "local_epochs": 1, "batch_size": 32, "lr": 0.01},
        "clients": {
            "dropout_prob": 0.0,
            "speed_factor_min": 0.5,
            "speed_factor_max": 2.0,
        },
        "strategies": [
            {"kind": "global_only"},
            {"kind": "finetune", "epochs": 8, "lr": 0.01, "layers": "after_first"},
            {"kind": "maml", "inner_lr": 0.05, "inner_steps": 10, "support_fraction": 0.8},
            {"kind": "fedper", "base_layers": 2},
            {"kind": "fed_distill", "digest_epochs": 1, "revisit_epochs": 1},
        ],
    }
