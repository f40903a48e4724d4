"""R(2+1)D ResNet backbone with BERT-style temporal pooling.

The backbone keeps the temporal axis (only spatial global pooling at the
end); the head prepends a learned classification token, adds learned
positional encodings and runs a small transformer encoder.  The output at
the token position is both the exported embedding and the input of the
final linear classifier.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import check_clip

STAGE_LAYERS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
DEFAULT_WIDTHS = (64, 128, 256, 512)
N_CLASSES = 2


def _mid_channels(cin, cout):
    # parameter-matched to a full 3x3x3 convolution
    return (cin * cout * 27) // (cin * 9 + 3 * cout)


class Conv2Plus1D(nn.Sequential):
    """Spatial (1, 3, 3) convolution followed by a temporal (3, 1, 1) convolution."""

    def __init__(self, cin, cout, mid, stride=1):
        super().__init__(
            nn.Conv3d(cin, mid, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1), bias=False),
            nn.BatchNorm3d(mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(mid, cout, (3, 1, 1), stride=(stride, 1, 1), padding=(1, 0, 0), bias=False),
        )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Sequential(
            Conv2Plus1D(cin, cout, _mid_channels(cin, cout), stride),
            nn.BatchNorm3d(cout),
            nn.ReLU(inplace=True),
        )
        self.conv2 = nn.Sequential(
            Conv2Plus1D(cout, cout, _mid_channels(cout, cout)),
            nn.BatchNorm3d(cout),
        )
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm3d(cout),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(self.conv2(self.conv1(x)) + identity)


class R2Plus1DBackbone(nn.Module):
    """R(2+1)D ResNet without the final temporal pooling.

    Temporal stride plan: the stem and first stage keep the frame count,
    stages 2-4 halve it, so 32 frames come out as 4 feature steps.
    """

    def __init__(self, layers=STAGE_LAYERS[34], widths=DEFAULT_WIDTHS):
        super().__init__()
        w0 = widths[0]
        stem_mid = max(1, (45 * w0) // 64)
        self.stem = nn.Sequential(
            nn.Conv3d(3, stem_mid, (1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3), bias=False),
            nn.BatchNorm3d(stem_mid),
            nn.ReLU(inplace=True),
            nn.Conv3d(stem_mid, w0, (3, 1, 1), padding=(1, 0, 0), bias=False),
            nn.BatchNorm3d(w0),
            nn.ReLU(inplace=True),
        )
        stages = []
        cin = w0
        for i, (n_blocks, cout) in enumerate(zip(layers, widths)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(cin, cout, stride)]
            blocks += [BasicBlock(cout, cout) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.out_dim = widths[-1]
        self.n_downsamples = len(layers) - 1
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def temporal_length(self, n_frames):
        t = n_frames
        for _ in range(self.n_downsamples):
            t = (t - 1) // 2 + 1
        return t

    def forward(self, x):
        """(B, 3, T, H, W) -> (B, T', D) after spatial-only average pooling."""
        x = self.stages(self.stem(x))
        return x.mean(dim=(3, 4)).transpose(1, 2)


class SelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout=0.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        attn = scores.softmax(dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class EncoderBlock(nn.Module):
    """Post-norm transformer block (attention, then GELU feed-forward)."""

    def __init__(self, dim, heads, ff_dim, dropout=0.1):
        super().__init__()
        self.attn = SelfAttention(dim, heads, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff_dim, dim))
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        a, attn = self.attn(x)
        x = self.norm1(x + self.drop(a))
        x = self.norm2(x + self.drop(self.ff(x)))
        return x, attn


class BertPoolHead(nn.Module):
    def __init__(self, dim=512, n_steps=4, heads=8, layers=1, ff_dim=None, dropout=0.1,
                 n_classes=N_CLASSES):
        super().__init__()
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embedding = nn.Parameter(torch.zeros(1, n_steps + 1, dim))
        self.norm = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(dim, heads, ff_dim or 2 * dim, dropout) for _ in range(layers)
        )
        self.classifier = nn.Linear(dim, n_classes)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embedding, std=0.02)

    def forward(self, features, return_attention=False):
        """(B, T', D) features -> logits (B, 2), embedding (B, D)."""
        b, t, _ = features.shape
        if t + 1 != self.pos_embedding.shape[1]:
            raise ValueError(
                f"head was built for {self.pos_embedding.shape[1] - 1} steps, got {t}"
            )
        x = torch.cat([self.cls_token.expand(b, -1, -1), features], dim=1)
        x = self.drop(self.norm(x + self.pos_embedding))
        maps = []
        for blk in self.blocks:
            x, attn = blk(x)
            maps.append(attn)
        embedding = x[:, 0]
        logits = self.classifier(embedding)
        if return_attention:
            return logits, embedding, maps
        return logits, embedding


class MeanPoolHead(nn.Module):
    """No-BERT ablation head: temporal average then a linear layer."""

    def __init__(self, dim=512, dropout=0.1, n_classes=N_CLASSES):
        super().__init__()
        self.drop = nn.Dropout(dropout)
        self.classifier = nn.Linear(dim, n_classes)

    def forward(self, features):
        embedding = features.mean(dim=1)
        return self.classifier(self.drop(embedding)), embedding


class CNNBert(nn.Module):
    """Clip classifier taking (B, T, 3, H, W) clips.

    ``forward`` returns ``(logits, embedding)``; with ``use_bert=False`` the
    head is the temporal-average ablation.
    """

    def __init__(self, n_frames=32, layers=STAGE_LAYERS[34], widths=DEFAULT_WIDTHS, use_bert=True,
                 heads=8, bert_layers=1, dropout=0.1):
        super().__init__()
        self.n_frames = n_frames
        self.backbone = R2Plus1DBackbone(layers, widths)
        self.n_steps = self.backbone.temporal_length(n_frames)
        dim = self.backbone.out_dim
        if use_bert:
            self.head = BertPoolHead(dim, self.n_steps, heads, bert_layers, 2 * dim, dropout)
        else:
            self.head = MeanPoolHead(dim, dropout)
        self.use_bert = use_bert

    @property
    def embedding_dim(self):
        return self.backbone.out_dim

    def forward_features(self, clip):
        check_clip(clip, n_frames=self.n_frames)
        if clip.dim() == 4:
            clip = clip.unsqueeze(0)
        return self.backbone(clip.permute(0, 2, 1, 3, 4))

    def forward(self, clip):
        return self.head(self.forward_features(clip))


def load_pretrained_backbone(model, path):
    """Load backbone weights from a state dict saved with this module layout."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    state = {k[len("backbone."):] if k.startswith("backbone.") else k: v for k, v in state.items()}
    missing, unexpected = model.backbone.load_state_dict(state, strict=False)
    return missing, unexpected
