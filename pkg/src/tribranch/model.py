"""The tri-branch fully convolutional network.

One shared convolutional base turns an image into a feature map, pixel
coordinate channels are appended, and three structurally identical
branch heads map those features to per-pixel class logits.  Two of the
heads (branch1, branch2) are the labeling pair whose agreement drives
pseudo-labeling; branch_t is the target-specific head trained on the
pseudo-labels it will be evaluated with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import ConvLayer, ParamStore, init_params
from .layers import conv2d_dilated, load_checkpoint, save_checkpoint
from .tensor import Tensor

BRANCH_NAMES = ("branch1", "branch2", "branch_t")


@dataclass
class ArchSpec:
    """Layer plan shared by the base and all three branches.

    Each entry is (out_channels, kernel_size, dilation); kernels are
    square.  The last branch layer must emit ``num_classes`` channels.
    """

    base_layers: list = field(
        default_factory=lambda: [(16, 3, 1), (32, 3, 1), (32, 3, 2), (64, 3, 2)]
    )
    branch_layers: list = field(default_factory=lambda: [(32, 3, 4), (32, 1, 1), (8, 1, 1)])
    num_classes: int = 8
    input_channels: int = 3

    def __post_init__(self):
        self.base_layers = [tuple(int(v) for v in layer) for layer in self.base_layers]
        self.branch_layers = [tuple(int(v) for v in layer) for layer in self.branch_layers]
        if self.num_classes < 1 or self.input_channels < 1:
            raise ValueError("num_classes and input_channels must be positive")
        if not self.base_layers or not self.branch_layers:
            raise ValueError("base and branch layer lists must be non-empty")
        for ch, k, d in self.base_layers + self.branch_layers:
            if ch < 1 or k < 1 or k % 2 == 0 or d < 1:
                raise ValueError(f"bad layer entry (out={ch}, k={k}, dilation={d})")
        if self.branch_layers[-1][0] != self.num_classes:
            raise ValueError(
                f"last branch layer emits {self.branch_layers[-1][0]} channels, "
                f"expected num_classes={self.num_classes}"
            )

    @property
    def base_depth(self) -> int:
        return self.base_layers[-1][0]

    @property
    def branch_input_depth(self) -> int:
        # Two coordinate channels ride along with the base features.
        return self.base_depth + 2


def coord_maps(h: int, w: int, dtype=np.float32) -> Tensor:
    """Two constant channels holding normalized pixel coordinates.

    Channel 0 is px/W and channel 1 is py/H with zero-based indices, so
    values span [0, (W-1)/W] and a single pixel gets (0, 0).
    """
    if h < 1 or w < 1:
        raise ValueError("coord_maps needs positive extents")
    xs = np.arange(w, dtype=dtype) / w
    ys = np.arange(h, dtype=dtype) / h
    out = np.empty((h, w, 2), dtype=dtype)
    out[:, :, 0] = xs[None, :]
    out[:, :, 1] = ys[:, None]
    return Tensor(out)


class FctnModel:
    """Shared base plus branch heads, with all parameters in one ParamStore."""

    def __init__(self, spec: ArchSpec, params: ParamStore, layers: dict):
        self.spec = spec
        self.params = params
        self.base = layers["base"]
        self.branches = {name: layers[name] for name in BRANCH_NAMES}

    @classmethod
    def create(cls, spec: ArchSpec, seed: int = 0, dtype=np.float32) -> "FctnModel":
        params = ParamStore()
        layers = {}
        plan = [("base", spec.base_layers, spec.input_channels)] + [
            (name, spec.branch_layers, spec.branch_input_depth) for name in BRANCH_NAMES
        ]
        stream = 0
        for ns, layer_plan, cin in plan:
            stack = []
            for i, (cout, k, dilation) in enumerate(layer_plan, start=1):
                kernel = init_params((k, k, cin, cout), np.random.SeedSequence([seed, stream]))
                bias = init_params((cout,), 0)
                stack.append(ConvLayer(kernel=kernel, bias=bias, dilation=dilation))
                params.add(f"{ns}.conv{i}.kernel", kernel)
                params.add(f"{ns}.conv{i}.bias", bias)
                stream += 1
                cin = cout
            layers[ns] = stack
        model = cls(spec, params, layers)
        if dtype != np.float32:
            model.cast(dtype)
        return model

    def cast(self, dtype):
        for _, p in self.params.items():
            p.data = p.data.astype(dtype)
            p.grad = None

    @property
    def dtype(self):
        return self.params.get("base.conv1.kernel").dtype

    def branch_kernels(self, which: str) -> list[Tensor]:
        """Convolution kernels of one branch, in layer order."""
        if which not in self.branches:
            raise ValueError(f"unknown branch {which!r}")
        return [layer.kernel for layer in self.branches[which]]

    def namespace_params(self, *namespaces: str) -> list[str]:
        prefixes = tuple(ns + "." for ns in namespaces)
        return [name for name in self.params.names() if name.startswith(prefixes)]

    # -- forward passes ------------------------------------------------

    def forward_base(self, image: Tensor, patch_cache: Optional[dict] = None) -> Tensor:
        if image.data.ndim != 3 or image.shape[2] != self.spec.input_channels:
            raise ValueError(
                f"image shape {image.shape} does not match input_channels={self.spec.input_channels}"
            )
        h, w = image.shape[:2]
        out = image
        for layer in self.base:
            out = T.relu(conv2d_dilated(out, layer, patch_cache))
        return T.concat([out, coord_maps(h, w, dtype=image.dtype)], axis=-1)

    def forward_branch(self, which: str, features: Tensor, patch_cache: Optional[dict] = None) -> Tensor:
        if which not in self.branches:
            raise ValueError(f"unknown branch {which!r}")
        if features.shape[-1] != self.spec.branch_input_depth:
            raise ValueError(
                f"feature depth {features.shape[-1]} does not match "
                f"branch input depth {self.spec.branch_input_depth}"
            )
        stack = self.branches[which]
        out = features
        for layer in stack[:-1]:
            out = T.relu(conv2d_dilated(out, layer, patch_cache))
        return conv2d_dilated(out, stack[-1], patch_cache)

    def forward_logits(self, which: str, image: Tensor, patch_cache: Optional[dict] = None) -> Tensor:
        features = self.forward_base(image, patch_cache)
        return self.forward_branch(which, features, patch_cache)

    def predict(self, which: str, image) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel argmax class ids and their softmax probabilities.

        ``image`` may be an H x W x Cin array or Tensor.  Ties break
        toward the smaller class id.  Runs without gradient tracking;
        returns plain integer / float arrays.
        """
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image), dtype=self.dtype)
        with T.no_grad():
            probs = T.softmax_channel(self.forward_logits(which, image, patch_cache={})).data
        labels = probs.argmax(axis=-1)
        conf = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
        return labels.astype(np.int32), conf

    # -- persistence -----------------------------------------------------

    def save(self, path):
        save_checkpoint(self.params, path)

    def load(self, path):
        load_checkpoint(path, into=self.params)
