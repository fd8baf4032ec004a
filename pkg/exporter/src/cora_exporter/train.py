"""Six-conv BatchNorm ConvNet for 16x16 grayscale digits, trained with torch,
plus folding of the normalization statistics into the conv weights."""
import numpy as np
import torch
import torch.nn as nn

# (out_channels, in_channels); all convs are 3x3, stride 1, padding 1.
# Channel widths give per-layer max ranks min(m, 9n) of 8/16/32/64/96/128.
CONV_CHANNELS = [(8, 1), (16, 8), (32, 16), (64, 32), (96, 64), (128, 96)]


class ConvNet(nn.Module):
    def __init__(self):
        super().__init__()
        blocks = []
        for i, (m, n) in enumerate(CONV_CHANNELS):
            blocks += [nn.Conv2d(n, m, 3, padding=1, bias=False),
                       nn.BatchNorm2d(m), nn.ReLU()]
            if i in (1, 3):
                blocks.append(nn.MaxPool2d(2, 2))
        blocks.append(nn.AvgPool2d(4, 4))
        self.features = nn.Sequential(*blocks)
        self.classifier = nn.Linear(128, 10)

    def forward(self, x):
        h = self.features(x)
        return self.classifier(h.flatten(1))


def train(splits, seed, epochs=6, finetune_epochs=2, batch_size=128,
          lr=1e-3, finetune_lr=5e-4, l1=2e-4):
    """Two-phase training; returns (model, val_accuracy).

    Phase one trains normally; phase two briefly fine-tunes with an L1
    penalty on conv weights. The penalty induces heavy-tailed weight
    distributions like those of large pretrained networks, so per-tensor
    quantization behaves realistically (a few outliers dominate the
    min-max range while the bulk stays small).
    """
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    model = ConvNet()
    loss_fn = nn.CrossEntropyLoss()
    conv_weights = [m.weight for m in model.features
                    if isinstance(m, nn.Conv2d)]

    train_x, train_y = splits["train"]
    tx = torch.tensor(train_x, dtype=torch.float32)
    ty = torch.tensor(train_y)
    order_rng = np.random.default_rng(seed)

    for phase_epochs, phase_lr, phase_l1 in ((epochs, lr, 0.0),
                                             (finetune_epochs, finetune_lr, l1)):
        opt = torch.optim.Adam(model.parameters(), lr=phase_lr)
        model.train()
        for _ in range(phase_epochs):
            perm = order_rng.permutation(len(ty))
            for start in range(0, len(ty) - batch_size + 1, batch_size):
                idx = perm[start:start + batch_size]
                opt.zero_grad()
                loss = loss_fn(model(tx[idx]), ty[idx])
                if phase_l1:
                    loss = loss + phase_l1 * sum(w.abs().sum()
                                                 for w in conv_weights)
                loss.backward()
                opt.step()

    model.eval()
    val_x, val_y = splits["val"]
    return model, accuracy(model, val_x, val_y)


def accuracy(model, images, labels):
    model.eval()
    with torch.no_grad():
        correct = 0
        x = torch.tensor(images, dtype=torch.float32)
        for start in range(0, len(labels), 512):
            logits = model(x[start:start + 512])
            pred = logits.argmax(dim=1).numpy()
            correct += int(np.sum(pred == labels[start:start + 512]))
    return correct / len(labels)


def logits_of(model, images):
    model.eval()
    with torch.no_grad():
        out = model(torch.tensor(images, dtype=torch.float32))
    return out.numpy().astype(np.float32)


def fold_batchnorm(model):
    """Fold each BatchNorm2d into its preceding conv.

    Returns per-conv (weight, bias) float32 arrays such that
    conv(w', x) + b' == bn(conv(w, x)) in eval mode.
    """
    folded = []
    convs = [m for m in model.features if isinstance(m, nn.Conv2d)]
    bns = [m for m in model.features if isinstance(m, nn.BatchNorm2d)]
    assert len(convs) == len(bns)
    for conv, bn in zip(convs, bns):
        w = conv.weight.detach().numpy().astype(np.float64)
        gamma = bn.weight.detach().numpy().astype(np.float64)
        beta = bn.bias.detach().numpy().astype(np.float64)
        mean = bn.running_mean.numpy().astype(np.float64)
        std = np.sqrt(bn.running_var.numpy().astype(np.float64) + bn.eps)
        scale = gamma / std
        folded.append((
            (w * scale[:, None, None, None]).astype(np.float32),
            (beta - mean * scale).astype(np.float32),
        ))
    return folded


class FoldedConvNet(nn.Module):
    """The same graph with BN removed and folded conv weights, used to verify
    fold equivalence before export."""

    def __init__(self, model):
        super().__init__()
        folded = fold_batchnorm(model)
        blocks = []
        for i, ((m, n), (w, b)) in enumerate(zip(CONV_CHANNELS, folded)):
            conv = nn.Conv2d(n, m, 3, padding=1, bias=True)
            with torch.no_grad():
                conv.weight.copy_(torch.tensor(w))
                conv.bias.copy_(torch.tensor(b))
            blocks += [conv, nn.ReLU()]
            if i in (1, 3):
                blocks.append(nn.MaxPool2d(2, 2))
        blocks.append(nn.AvgPool2d(4, 4))
        self.features = nn.Sequential(*blocks)
        self.classifier = model.classifier

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))
