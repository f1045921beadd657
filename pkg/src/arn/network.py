"""The six learnable components: backbone, shared/private encoders, decoder, classifier.

Tensors use channels-first layout (N, C, H, W); the configuration speaks in
(H, W, C) to match how images are stored.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import ConfigError, Domain, ModelConfig, UsageError, derived_seed

COMPONENTS = ("E_I", "E_C", "E_S", "E_T", "D_C", "C_S")


def _act() -> nn.Module:
    # smooth everywhere so finite-difference checks need no kink handling
    return nn.GELU()


def _init_weights(module: nn.Module) -> None:
    # variance-preserving weights and zero biases: a zero input maps to a zero output
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """Small strided conv stack mapping images to an h x w x c feature map.

    Any module with the same input/output contract can replace it (e.g. a
    truncated pretrained network).
    """

    def __init__(self, image_shape, feature_map_shape):
        super().__init__()
        H, W, C = image_shape
        h, w, c = feature_map_shape
        n_down = 0
        size = min(H, W)
        while size // 2 >= max(h, w):
            size //= 2
            n_down += 1
        widths = [max(c // 2 ** (n_down - i), 8) for i in range(n_down)] + [c]
        layers: list[nn.Module] = [nn.Conv2d(C, widths[0], 3, padding=1), _act()]
        for i in range(n_down):
            layers += [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1), _act()]
        self.body = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d((h, w))
        self.out_hw = (h, w)

    def forward(self, x):
        x = self.body(x)
        if tuple(x.shape[-2:]) != self.out_hw:
            x = self.pool(x)
        return x


class LatentEncoder(nn.Module):
    """Three-layer fully convolutional encoder, h x w -> 2 x 2 -> 1 x 1, then flatten."""

    def __init__(self, feature_map_shape, channels):
        super().__init__()
        h, w, c = feature_map_shape
        c1, c2, c3 = channels
        kernel = (math.ceil(h / 2), math.ceil(w / 2))
        stride = (h // 2, w // 2)
        self.net = nn.Sequential(
            nn.Conv2d(c, c1, 3, padding=1),
            _act(),
            nn.Conv2d(c1, c2, kernel, stride=stride),
            _act(),
            nn.Conv2d(c2, c3, 2),
        )

    def forward(self, x):
        return self.net(x).flatten(1)


class LatentDecoder(nn.Module):
    """Mirror of the encoder: 1 x 1 x 2d -> 2 x 2 -> h x w -> h x w x c."""

    def __init__(self, feature_map_shape, channels, latent_dim):
        super().__init__()
        h, w, c = feature_map_shape
        c1, c2, _ = channels
        kernel = (math.ceil(h / 2), math.ceil(w / 2))
        stride = (h // 2, w // 2)
        self.net = nn.Sequential(
            nn.ConvTranspose2d(2 * latent_dim, c2, 2),
            _act(),
            nn.ConvTranspose2d(c2, c1, kernel, stride=stride),
            _act(),
            nn.Conv2d(c1, c, 3, padding=1),
        )

    def forward(self, z):
        return self.net(z[:, :, None, None])


class Classifier(nn.Module):
    def __init__(self, latent_dim, num_classes, dropout_rate):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, latent_dim),
            _act(),
            nn.Dropout(dropout_rate),
            nn.Linear(latent_dim, num_classes),
        )

    def forward(self, x):
        return self.net(x)


class ARN(nn.Module):
    """Adaptation and re-identification network.

    With ``use_private=False`` the private encoders are not built and the
    private half of the decoder input is filled with zeros, so the decoder
    keeps the same width across ablations.
    """

    def __init__(
        self,
        config: ModelConfig,
        use_private: bool = True,
        backbone: nn.Module | None = None,
        seed: int | None = None,
    ):
        super().__init__()
        self.config = config
        self.use_private = use_private
        fm = config.feature_map_shape

        def make(name, factory):
            # each component draws from its own stream, so ablations share initial weights
            with torch.random.fork_rng(devices=[], enabled=seed is not None):
                if seed is not None:
                    torch.manual_seed(derived_seed(seed, name))
                module = factory()
                _init_weights(module)
                return module

        self.E_I = backbone if backbone is not None else make("E_I", lambda: Backbone(config.image_shape, fm))
        self.E_C = make("E_C", lambda: LatentEncoder(fm, config.encoder_channels))
        self.E_S = make("E_S", lambda: LatentEncoder(fm, config.encoder_channels)) if use_private else None
        self.E_T = make("E_T", lambda: LatentEncoder(fm, config.encoder_channels)) if use_private else None
        self.D_C = make("D_C", lambda: LatentDecoder(fm, config.encoder_channels, config.latent_dim))
        self.C_S = make("C_S", lambda: Classifier(config.latent_dim, config.num_classes, config.dropout_rate))

    def _check(self, x, shape, what):
        h, w, c = shape
        if x.ndim != 4 or tuple(x.shape[1:]) != (c, h, w) or x.shape[0] == 0:
            raise ConfigError(f"{what}: expected batch of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}")

    def extract_feature_map(self, images):
        self._check(images, self.config.image_shape, "images")
        maps = self.E_I(images)
        self._check(maps, self.config.feature_map_shape, "backbone output")
        return maps

    def encode_shared(self, maps):
        self._check(maps, self.config.feature_map_shape, "feature maps")
        return self.E_C(maps)

    def encode_private(self, maps, domain: Domain):
        self._check(maps, self.config.feature_map_shape, "feature maps")
        if not isinstance(domain, Domain):
            raise UsageError("encode_private takes a single Domain per call; split mixed batches first")
        if not self.use_private:
            return maps.new_zeros(maps.shape[0], self.config.latent_dim)
        encoder = self.E_S if domain is Domain.SOURCE else self.E_T
        return encoder(maps)

    def decode(self, shared, private):
        if shared.shape != private.shape or shared.shape[-1] != self.config.latent_dim:
            raise ConfigError(f"latent pair shapes {tuple(shared.shape)} / {tuple(private.shape)} do not match")
        return self.D_C(torch.cat([shared, private], dim=1))

    def logits(self, shared, domain: Domain = Domain.SOURCE):
        if self.training and domain is not Domain.SOURCE:
            raise UsageError("the classifier is trained on source shared features only")
        return self.C_S(shared)

    def classify(self, shared, domain: Domain = Domain.SOURCE):
        return F.softmax(self.logits(shared, domain), dim=1)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {}
        for name in COMPONENTS:
            module = getattr(self, name)
            groups[name] = [] if module is None else list(module.parameters())
        return groups

    def embed(self, images):
        """Shared feature of images, the only path used at retrieval time."""
        return self.encode_shared(self.extract_feature_map(images))


def build_model(config: ModelConfig, use_private: bool = True, seed: int | None = None) -> ARN:
    return ARN(config, use_private, seed=seed)


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C arrays into an (N, C, H, W) tensor."""
    array = np.stack([np.asarray(im) for im in images]).astype(np.float32, copy=False)
    return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous().to(dtype)


def save_checkpoint(model: ARN, path, extra: dict | None = None) -> None:
    arrays = {}
    for component, module in ((c, getattr(model, c)) for c in COMPONENTS):
        if module is None:
            continue
        for key, tensor in module.state_dict().items():
            arrays[f"{component}/{key}"] = tensor.detach().cpu().numpy()
    meta = {"model_config": asdict(model.config), "use_private": model.use_private}
    if extra:
        meta.update(extra)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> ARN:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        config = ModelConfig(**meta["model_config"])
        if expected is not None:
            for name in ("image_shape", "feature_map_shape", "latent_dim"):
                if getattr(expected, name) != getattr(config, name):
                    raise ConfigError(
                        f"checkpoint {name} {getattr(config, name)} does not match expected {getattr(expected, name)}"
                    )
        model = ARN(config, use_private=meta["use_private"])
        for component in COMPONENTS:
            module = getattr(model, component)
            if module is None:
                continue
            state = module.state_dict()
            for key in state:
                stored = archive[f"{component}/{key}"]
                if stored.shape != tuple(state[key].shape):
                    raise ConfigError(f"{component}/{key}: shape {stored.shape} != {tuple(state[key].shape)}")
                state[key] = torch.from_numpy(stored)
            module.load_state_dict(state)
    model.eval()
    return model
