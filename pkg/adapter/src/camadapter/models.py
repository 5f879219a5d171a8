"""Toy networks: a multi-block classifier with feature taps and a small
encoder-decoder segmenter. Both are deliberately tiny; the point is the
export/training contract, not benchmark accuracy."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

CLASSIFIER_CHANNELS = (8, 12, 16, 20, 24)


class TapClassifier(nn.Module):
    """Five conv blocks with 2x pooling between them; the activation after
    each block is a tap, so tap m lives at 1/2^m of the input resolution."""

    def __init__(self):
        super().__init__()
        blocks = []
        in_ch = 1
        for out_ch in CLASSIFIER_CHANNELS:
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.ReLU(inplace=False),
            ))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)
        self.head = nn.Linear(CLASSIFIER_CHANNELS[-1], 1)

    def forward_with_taps(self, x):
        taps = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            taps.append(x)
        pooled = F.adaptive_avg_pool2d(x, 1).flatten(1)
        logit = self.head(pooled).squeeze(1)
        return logit, taps

    def forward(self, x):
        logit, _ = self.forward_with_taps(x)
        return logit


class TinySegmenter(nn.Module):
    """Two-level encoder-decoder with skip connections, sigmoid output."""

    def __init__(self, width: int = 12):
        super().__init__()

        def conv(in_ch, out_ch):
            return nn.Sequential(
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
                nn.ReLU(inplace=False),
                nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
                nn.ReLU(inplace=False),
            )

        self.enc1 = conv(1, width)
        self.enc2 = conv(width, width * 2)
        self.bottleneck = conv(width * 2, width * 2)
        self.up2 = nn.ConvTranspose2d(width * 2, width * 2, kernel_size=2, stride=2)
        self.dec2 = conv(width * 4, width)
        self.up1 = nn.ConvTranspose2d(width, width, kernel_size=2, stride=2)
        self.dec1 = conv(width * 2, width)
        self.out = nn.Conv2d(width, 1, kernel_size=1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(b), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.out(d1)).squeeze(1)
