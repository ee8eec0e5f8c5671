"""Small torch classifiers expressible in the engine's layer vocabulary.

Each forward takes a quant mode: None (full precision), "nearest", or
"flipped"; weighted layers fake-quantize their weights accordingly (biases
stay full precision, matching the engine). No batch norm anywhere, so the
exported containers need no folding.
"""

from __future__ import annotations

import torch
from torch import nn

from .containers import write_model
from .quant import fake_quant


class QuantLinear(nn.Linear):
    def forward_mode(self, x, bits, mode):
        w = self.weight if mode is None else fake_quant(self.weight, bits, flipped=(mode == "flipped"))
        return nn.functional.linear(x, w, self.bias)


class QuantConv2d(nn.Conv2d):
    def forward_mode(self, x, bits, mode):
        w = self.weight if mode is None else fake_quant(self.weight, bits, flipped=(mode == "flipped"))
        return self._conv_forward(x, w, self.bias)


class SmallCnn(nn.Module):
    """conv-relu-pool, conv-relu-pool, linear head over 1x28x28 inputs."""

    input_shape = (1, 28, 28)

    def __init__(self, classes: int = 10):
        super().__init__()
        self.conv1 = QuantConv2d(1, 8, 3, stride=1, padding=1)
        self.conv2 = QuantConv2d(8, 16, 3, stride=1, padding=1)
        self.fc = QuantLinear(16 * 7 * 7, classes)
        self.pool = nn.MaxPool2d(2, 2)

    def forward(self, x, bits: int = 8, mode: str | None = None):
        x = self.pool(torch.relu(self.conv1.forward_mode(x, bits, mode)))
        x = self.pool(torch.relu(self.conv2.forward_mode(x, bits, mode)))
        return self.fc.forward_mode(torch.flatten(x, 1), bits, mode)

    def export_layers(self):
        tensors = [
            ("layer0.weight", self.conv1.weight.detach().numpy()),
            ("layer0.bias", self.conv1.bias.detach().numpy()),
            ("layer3.weight", self.conv2.weight.detach().numpy()),
            ("layer3.bias", self.conv2.bias.detach().numpy()),
            ("layer7.weight", self.fc.weight.detach().numpy()),
            ("layer7.bias", self.fc.bias.detach().numpy()),
        ]
        layers = [
            {"kind": "conv2d", "in_channels": 1, "out_channels": 8, "k": 3, "stride": 1,
             "padding": 1, "weight": "layer0.weight", "bias": "layer0.bias"},
            {"kind": "relu"},
            {"kind": "maxpool", "k": 2, "stride": 2},
            {"kind": "conv2d", "in_channels": 8, "out_channels": 16, "k": 3, "stride": 1,
             "padding": 1, "weight": "layer3.weight", "bias": "layer3.bias"},
            {"kind": "relu"},
            {"kind": "maxpool", "k": 2, "stride": 2},
            {"kind": "flatten"},
            {"kind": "linear", "in": 16 * 7 * 7, "out": self.fc.out_features,
             "weight": "layer7.weight", "bias": "layer7.bias"},
        ]
        return layers, tensors


class Mlp(nn.Module):
    input_shape = (1, 28, 28)

    def __init__(self, classes: int = 10, hidden: int = 64):
        super().__init__()
        self.fc1 = QuantLinear(28 * 28, hidden)
        self.fc2 = QuantLinear(hidden, classes)

    def forward(self, x, bits: int = 8, mode: str | None = None):
        x = torch.flatten(x, 1)
        x = torch.relu(self.fc1.forward_mode(x, bits, mode))
        return self.fc2.forward_mode(x, bits, mode)

    def export_layers(self):
        tensors = [
            ("layer1.weight", self.fc1.weight.detach().numpy()),
            ("layer1.bias", self.fc1.bias.detach().numpy()),
            ("layer3.weight", self.fc2.weight.detach().numpy()),
            ("layer3.bias", self.fc2.bias.detach().numpy()),
        ]
        layers = [
            {"kind": "flatten"},
            {"kind": "linear", "in": 28 * 28, "out": self.fc1.out_features,
             "weight": "layer1.weight", "bias": "layer1.bias"},
            {"kind": "relu"},
            {"kind": "linear", "in": self.fc1.out_features, "out": self.fc2.out_features,
             "weight": "layer3.weight", "bias": "layer3.bias"},
        ]
        return layers, tensors


ARCHS = {"small_cnn": SmallCnn, "mlp": Mlp}


def export_model(model, path):
    layers, tensors = model.export_layers()
    write_model(path, model.input_shape, layers, tensors)
