"""Encoder, decoder, image and latent discriminators, recognizer, identity embedder.

Depth follows the input size 2**k: the encoder has k-2 stride-2 convolutions
(five at 128x128), the decoder mirrors it starting from a 1x1 projection, and
the image discriminator trunk has min(k-2, 4) stride-2 convolutions. With
``base_width=64`` at 128x128 every width equals the published table.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

LRELU_SLOPE = 0.2


def _log2_size(image_size: int) -> int:
    k = int(math.log2(image_size))
    if 2**k != image_size or image_size < 32:
        raise ValueError(f"image size must be a power of two >= 32, got {image_size}")
    return k


def _check_image(x: torch.Tensor, channels: int, size: int):
    if x.dim() != 4 or x.shape[1:] != (channels, size, size):
        raise ValueError(f"expected input [B, {channels}, {size}, {size}], got {list(x.shape)}")


class Encoder(nn.Module):
    def __init__(self, image_size=128, channels=3, latent_dim=64, base_width=64):
        super().__init__()
        self.channels, self.image_size = channels, image_size
        k = _log2_size(image_size)
        layers, c_in = [], channels
        for i in range(k - 2):
            w = base_width * 2**i
            layers += [nn.Conv2d(c_in, w, 4, 2, 1), nn.InstanceNorm2d(w, affine=True),
                       nn.LeakyReLU(LRELU_SLOPE)]
            c_in = w
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in * 4 * 4, latent_dim)

    def forward(self, x):
        _check_image(x, self.channels, self.image_size)
        h = self.convs(x).flatten(1)
        return torch.tanh(self.fc(h))


class Decoder(nn.Module):
    def __init__(self, image_size=128, channels=3, latent_dim=64, num_classes=6, base_width=64):
        super().__init__()
        self.in_dim = latent_dim + num_classes
        self.latent_dim, self.num_classes = latent_dim, num_classes
        k = _log2_size(image_size)
        widths = [max(int(base_width * 2.0**j), 1) for j in range(k - 4, -2, -1)]
        layers, c_in = [], self.in_dim
        for i, w in enumerate(widths):
            # the first layer projects the 1x1 code to 4x4, the rest double
            layers += [nn.ConvTranspose2d(c_in, w, 4, 2, 0 if i == 0 else 1),
                       nn.InstanceNorm2d(w, affine=True), nn.ReLU()]
            c_in = w
        layers += [nn.ConvTranspose2d(c_in, channels, 4, 2, 1), nn.Tanh()]
        self.deconvs = nn.Sequential(*layers)

    def forward(self, latent, u):
        if latent.shape[-1] != self.latent_dim or u.shape[-1] != self.num_classes:
            raise ValueError(f"decoder expects latent {self.latent_dim} and code {self.num_classes}, "
                             f"got {latent.shape[-1]} and {u.shape[-1]}")
        h = torch.cat([latent, u], dim=1)
        return self.deconvs(h[:, :, None, None])


class Generator(nn.Module):
    def __init__(self, image_size=128, channels=3, latent_dim=64, num_classes=6, base_width=64):
        super().__init__()
        self.enc = Encoder(image_size, channels, latent_dim, base_width)
        self.dec = Decoder(image_size, channels, latent_dim, num_classes, base_width)

    def forward(self, x, u):
        return self.dec(self.enc(x), u)


class ImageDiscriminator(nn.Module):
    """Shared trunk with an unbounded patch critic head and a K-way classifier head."""

    def __init__(self, image_size=128, channels=3, num_classes=6, base_width=64):
        super().__init__()
        self.channels, self.image_size = channels, image_size
        k = _log2_size(image_size)
        depth = min(k - 2, 4)
        layers, c_in = [], channels
        for i in range(depth):
            w = base_width * 2**i
            layers += [nn.Conv2d(c_in, w, 4, 2, 1), nn.LeakyReLU(LRELU_SLOPE)]
            c_in = w
        self.trunk = nn.Sequential(*layers)
        trunk_size = image_size // 2**depth
        self.adv = nn.Conv2d(c_in, 1, 4, 2, 1)
        head_size = trunk_size // 2
        self.cls = nn.Sequential(
            nn.Conv2d(c_in, 2 * c_in, 4, 2, 1), nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(2 * c_in, num_classes, head_size, 1, 0),
        )

    def forward(self, x):
        _check_image(x, self.channels, self.image_size)
        h = self.trunk(x)
        return self.adv(h), self.cls(h).flatten(1)


class LatentDiscriminator(nn.Module):
    def __init__(self, latent_dim=64):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.Linear(latent_dim, 64), nn.LeakyReLU(LRELU_SLOPE),
            nn.Linear(64, 32), nn.LeakyReLU(LRELU_SLOPE),
            nn.Linear(32, 16), nn.LeakyReLU(LRELU_SLOPE),
            nn.Linear(16, 1), nn.Sigmoid(),
        )

    def forward(self, v):
        if v.shape[-1] != self.latent_dim:
            raise ValueError(f"expected latent of size {self.latent_dim}, got {v.shape[-1]}")
        return self.net(v).squeeze(-1)


class Recognizer(nn.Module):
    """Feature extractor (convs + two FC layers) followed by a linear classifier.

    ``backbone`` replaces the two trainable stem convolutions with a frozen
    pre-trained front end whose output has ``backbone_channels`` maps.
    """

    def __init__(self, image_size=128, channels=3, num_classes=6, widths=(256, 512),
                 hidden=2048, feature_dim=512, dropout=0.5, backbone: nn.Module | None = None,
                 backbone_channels: int | None = None):
        super().__init__()
        self.channels, self.image_size = channels, image_size
        if backbone is None:
            stem_w = (max(widths[0] // 4, 1), max(widths[0] // 2, 1))
            self.stem = nn.Sequential(
                nn.Conv2d(channels, stem_w[0], 3, 2, 1), nn.ReLU(),
                nn.Conv2d(stem_w[0], stem_w[1], 3, 2, 1), nn.ReLU(),
            )
            c_in = stem_w[1]
        else:
            if backbone_channels is None:
                raise ValueError("backbone_channels is required with a backbone")
            self.stem = backbone
            for p in backbone.parameters():
                p.requires_grad_(False)
            c_in = backbone_channels
        self.frozen_stem = backbone is not None
        convs = []
        for w in widths:
            convs += [nn.Conv2d(c_in, w, 3, 2, 1), nn.ReLU()]
            c_in = w
        self.convs = nn.Sequential(*convs)
        with torch.no_grad():
            n_flat = self.convs(self.stem(torch.zeros(1, channels, image_size, image_size))).numel()
        self.fc = nn.Sequential(nn.Linear(n_flat, hidden), nn.ReLU(),
                                nn.Linear(hidden, feature_dim), nn.ReLU())
        self.drop = nn.Dropout(dropout)
        self.classifier = nn.Linear(feature_dim, num_classes)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen_stem:
            self.stem.eval()
        return self

    def extract(self, x):
        _check_image(x, self.channels, self.image_size)
        return self.fc(self.convs(self.stem(x)).flatten(1))

    def classify(self, features):
        return self.classifier(self.drop(features))

    def forward(self, x):
        f = self.extract(x)
        return f, self.classify(f)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class IdentityEmbedder(nn.Module):
    """Frozen identity feature map.

    Wraps any module mapping images to vectors; parameters never receive
    gradient, but gradient still flows through to the input image.
    """

    def __init__(self, net: nn.Module, out_dim: int):
        super().__init__()
        self.net = net
        self.out_dim = out_dim
        self.freeze()

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        self.net.eval()
        return self

    def forward(self, x):
        return self.net(x)


def toy_embedder_net(image_size=32, channels=1, embed_dim=64, width=16) -> nn.Module:
    """Small conv net for toy identity embeddings (trained, then frozen)."""
    k = _log2_size(image_size)
    layers, c_in = [], channels
    for i in range(k - 2):
        w = width * 2 ** min(i, 3)
        layers += [nn.Conv2d(c_in, w, 4, 2, 1), nn.LeakyReLU(LRELU_SLOPE)]
        c_in = w
    return nn.Sequential(*layers, nn.Flatten(), nn.Linear(c_in * 16, embed_dim))


def identity_features(embedder: IdentityEmbedder, x: torch.Tensor) -> torch.Tensor:
    return embedder(x)


def build_networks(cfg) -> dict[str, nn.Module]:
    """Instantiate G, D_img, D_z and R for an ExperimentConfig."""
    s, c, n, k, w = cfg.image_size, cfg.channels, cfg.latent_dim, cfg.num_classes, cfg.base_width
    return {
        "G": Generator(s, c, n, k, w),
        "D_img": ImageDiscriminator(s, c, k, w),
        "D_z": LatentDiscriminator(n),
        "R": Recognizer(s, c, k, tuple(cfg.recognizer_widths), cfg.recognizer_hidden,
                        cfg.feature_dim, cfg.dropout),
    }


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def shape_table(cfg, batch: int = 1) -> list[tuple[str, str, tuple]]:
    """Per-layer output shapes of one forward pass through all five networks."""
    nets = build_networks(cfg)
    emb = toy_embedder_net(cfg.image_size, cfg.channels, cfg.embed_dim, cfg.embed_width)
    rows: list[tuple[str, str, tuple]] = []
    hooks = []

    def record(net_name, layer_name):
        def hook(_m, _inp, out):
            outs = out if isinstance(out, tuple) else (out,)
            for o in outs:
                rows.append((net_name, layer_name, tuple(o.shape)))
        return hook

    named = {"G_enc": nets["G"].enc, "G_dec": nets["G"].dec, "D_img": nets["D_img"],
             "D_z": nets["D_z"], "R": nets["R"], "F_id": emb}
    for net_name, net in named.items():
        for layer_name, m in net.named_modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                hooks.append(m.register_forward_hook(record(net_name, layer_name)))
    x = torch.zeros(batch, cfg.channels, cfg.image_size, cfg.image_size)
    u = torch.zeros(batch, cfg.num_classes)
    with torch.no_grad():
        for net in named.values():
            net.eval()
        g = nets["G"].enc(x)
        rows.append(("G_enc", "output", tuple(g.shape)))
        img = nets["G"].dec(g, u)
        rows.append(("G_dec", "output", tuple(img.shape)))
        adv, logits = nets["D_img"](img)
        rows.append(("D_img", "adv_output", tuple(adv.shape)))
        rows.append(("D_img", "cls_output", tuple(logits.shape)))
        p = nets["D_z"](g)
        rows.append(("D_z", "output", tuple(p.shape)))
        f, r_logits = nets["R"](x)
        rows.append(("R", "features", tuple(f.shape)))
        rows.append(("R", "logits", tuple(r_logits.shape)))
        e = emb(x)
        rows.append(("F_id", "output", tuple(e.shape)))
    for h in hooks:
        h.remove()
    return rows


def format_shape_table(rows) -> str:
    lines = [f"{'network':<8} {'layer':<16} shape"]
    lines += [f"{n:<8} {l:<16} {'x'.join(map(str, s))}" for n, l, s in rows]
    return "\n".join(lines)
