"""Toy encoder/quantizer/mapper/decoder segmentation model.

A small from-scratch convolutional encoder downsamples the image, the
bottleneck quantizes features and pools the discrete codes onto learnable
references, a learned linear map brings the pooled bins back onto the
spatial grid (residually added to the codes by default), and a mirrored
transposed-convolution decoder produces per-class logits.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff
from .autodiff import (Parameter, Rng, Tensor, concat, conv2d,
                       conv_transpose2d, logsumexp, no_grad)
from .quantizer import Codebook, codebook_usage, quantize
from .mapper import NystromEmbedding, embed_multi_ref, init_references


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class ModelConfig:
    H: int = 32
    W: int = 32
    C: int = 1
    classes: int = 3
    enc_channels: tuple = (16, 32)       # one stride-2 stage per entry
    K: int = 64
    dim: int = 32
    t: int = 8
    q: int = 2
    sigma_pos: float = 0.3
    epsilon: float = 0.1
    sinkhorn_iterations: int = 10
    k_a: int = 16
    beta: float = 0.25
    bottleneck_blocks: int = 2
    stem_channels: int = 16              # stride-1 blocks at full resolution
    loss_mode: str = "softmax"           # "softmax" | "per-class-bce"
    respatial_mode: str = "residual"     # "residual" | "replace"

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        depth = len(self.enc_channels)
        if self.H % (2 ** depth) or self.W % (2 ** depth):
            raise ValueError("H and W must be divisible by 2^depth")
        for name in ("classes", "K", "dim", "t", "q", "k_a"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def grid_h(self):
        return self.H // (2 ** len(self.enc_channels))

    @property
    def grid_w(self):
        return self.W // (2 ** len(self.enc_channels))

    def to_dict(self):
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _conv_param(rng, name, f, c, kh, kw):
    fan_in = c * kh * kw
    w = Parameter(rng.normal((f, c, kh, kw), scale=np.sqrt(2.0 / fan_in)), name)
    b = Parameter(np.zeros(f), name + ".bias")
    return w, b


class ConvBlock:
    """3x3 conv + group normalization + ReLU."""

    def __init__(self, rng, name, c_in, c_out, stride=1):
        self.w, self.b = _conv_param(rng, name + ".w", c_out, c_in, 3, 3)
        self.gamma = Parameter(np.ones((1, c_out, 1, 1)), name + ".gamma")
        self.beta = Parameter(np.zeros((1, c_out, 1, 1)), name + ".beta")
        self.stride = stride
        self.groups = _pick_groups(c_out)

    def __call__(self, x):
        y = conv2d(x, self.w, self.b, stride=self.stride, pad=1)
        y = group_norm(y, self.gamma, self.beta, self.groups)
        return y.relu()

    def parameters(self):
        return [self.w, self.b, self.gamma, self.beta]


class UpBlock:
    """4x4 stride-2 transposed conv (overlapping) + group norm + ReLU."""

    def __init__(self, rng, name, c_in, c_out):
        fan_in = c_in * 16
        self.w = Parameter(
            rng.normal((c_in, c_out, 4, 4), scale=np.sqrt(2.0 / fan_in)),
            name + ".w")
        self.b = Parameter(np.zeros(c_out), name + ".bias")
        self.gamma = Parameter(np.ones((1, c_out, 1, 1)), name + ".gamma")
        self.beta = Parameter(np.zeros((1, c_out, 1, 1)), name + ".beta")
        self.groups = _pick_groups(c_out)

    def __call__(self, x):
        y = conv_transpose2d(x, self.w, self.b, stride=2, pad=1)
        y = group_norm(y, self.gamma, self.beta, self.groups)
        return y.relu()

    def parameters(self):
        return [self.w, self.b, self.gamma, self.beta]


def _pick_groups(channels):
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def group_norm(x, gamma, beta, groups, eps=1e-5):
    b, c, h, w = x.shape
    xg = x.reshape(b, groups, (c // groups) * h * w)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    normed = centered * (var + eps) ** -0.5
    return normed.reshape(b, c, h, w) * gamma + beta


class SegModel:
    def __init__(self, config, rng):
        self.config = config
        cfg = config
        c_prev = cfg.C
        self.enc = []
        if cfg.stem_channels:
            self.enc.append(ConvBlock(rng, "stem", c_prev, cfg.stem_channels))
            c_prev = cfg.stem_channels
        for i, c_out in enumerate(cfg.enc_channels):
            self.enc.append(ConvBlock(rng, f"enc{i}", c_prev, c_out, stride=2))
            c_prev = c_out
        self.pre = []
        for i in range(cfg.bottleneck_blocks):
            self.pre.append(ConvBlock(rng, f"pre{i}", c_prev, cfg.dim))
            c_prev = cfg.dim
        self.codebook = Codebook.create(cfg.K, cfg.dim, rng.spawn(11))
        self.nystrom = NystromEmbedding.create(cfg.k_a, cfg.dim, rng.spawn(12))
        self.refs = init_references(
            "random-unit", rng.spawn(13), cfg.t, cfg.k_a, cfg.q,
            sigma_pos=cfg.sigma_pos, epsilon=cfg.epsilon,
            iterations=cfg.sinkhorn_iterations)
        n = cfg.grid_h * cfg.grid_w
        in_dim = cfg.q * cfg.t * cfg.k_a
        self.proj_w = Parameter(
            rng.normal((in_dim, n * cfg.dim), scale=np.sqrt(1.0 / in_dim)),
            "proj.w")
        self.proj_b = Parameter(np.zeros(n * cfg.dim), "proj.bias")
        self.post = [ConvBlock(rng, f"post{i}", cfg.dim, cfg.dim)
                     for i in range(cfg.bottleneck_blocks)]
        self.dec = []
        dec_channels = list(reversed(cfg.enc_channels))
        c_prev = cfg.dim
        for i, c_out in enumerate(dec_channels):
            self.dec.append(UpBlock(rng, f"dec{i}", c_prev, c_out))
            c_prev = c_out
        if cfg.stem_channels:
            self.dec.append(ConvBlock(rng, "dec_stem", c_prev,
                                      cfg.stem_channels))
            c_prev = cfg.stem_channels
        self.head_w, self.head_b = _conv_param(rng, "head", cfg.classes,
                                               c_prev, 3, 3)

    def parameters(self):
        params = []
        for blk in self.enc + self.pre + self.post + self.dec:
            params.extend(blk.parameters())
        params.append(self.codebook.E)
        params.extend(self.nystrom.parameters())
        params.extend(self.refs.parameters())
        params.extend([self.proj_w, self.proj_b, self.head_w, self.head_b])
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, image, smooth_quantizer=False):
        """image: [C, H, W] or [B, C, H, W] -> (logits, quant_loss, diagnostics).

        smooth_quantizer=True bypasses the hard code assignment (codes stay
        continuous and the literal single-term quantization loss is used), so
        the whole network is differentiable in the ordinary sense. Gradient
        checks use this mode; the straight-through estimator is biased by
        construction and cannot match finite differences.
        """
        cfg = self.config
        x = image if isinstance(image, Tensor) else Tensor(
            np.asarray(image, dtype=np.float64))
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (cfg.C, cfg.H, cfg.W):
            raise ValueError(f"image shape {x.shape[1:]} != "
                             f"({cfg.C}, {cfg.H}, {cfg.W})")
        for blk in self.enc:
            x = blk(x)
        for blk in self.pre:
            x = blk(x)
        bsz = x.shape[0]
        h, w, dim = cfg.grid_h, cfg.grid_w, cfg.dim
        n = h * w
        grids = []
        qlosses = []
        usage = np.zeros(cfg.K, dtype=np.int64)
        residuals = []
        for bi in range(bsz):
            z_con = x[bi].reshape(dim, n).transpose()        # n x dim codes
            if smooth_quantizer:
                from .quantizer import quant_loss as _ql, _sqdist
                indices = np.argmin(_sqdist(z_con.data, self.codebook.E.data),
                                    axis=1)
                qr_z_dis = z_con
                usage += codebook_usage(indices, cfg.K)
                qlosses.append(_ql(z_con, self.codebook, indices,
                                   literal_loss=True))
            else:
                qr = quantize(z_con, self.codebook, beta=cfg.beta)
                usage += codebook_usage(qr.indices, cfg.K)
                qlosses.append(qr.quant_loss)
                qr_z_dis = qr.z_dis
            pooled = embed_multi_ref(qr_z_dis, self.refs, self.nystrom)
            vec = pooled.reshape(1, cfg.q * cfg.t * cfg.k_a)
            spatial = (vec @ self.proj_w + self.proj_b).reshape(n, dim)
            if cfg.respatial_mode == "residual":
                out = qr_z_dis + spatial
            else:
                out = spatial
            grids.append(out.transpose().reshape(1, dim, h, w))
        y = concat(grids, axis=0)
        quant_loss = qlosses[0] if bsz == 1 else \
            concat([q.reshape(1) for q in qlosses], axis=0).mean()
        for blk in self.post:
            y = blk(y)
        for blk in self.dec:
            y = blk(y)
        logits = conv2d(y, self.head_w, self.head_b, stride=1, pad=1)
        if squeeze:
            logits = logits[0]
        diagnostics = {"codebook_usage": usage}
        return logits, quant_loss, diagnostics

    def predict(self, image):
        """Per-pixel argmax label map (ties to the lowest class index)."""
        logits, _, _ = self.forward(image)
        return np.argmax(logits.data, axis=-3).astype(np.int64)

    def inspect_sample(self, image):
        """Bottleneck internals for one image: transport plans per reference,
        position weights, codebook usage, and the predicted label map."""
        from .mapper import nystrom_embed, ot_align, position_weights
        cfg = self.config
        with no_grad():
            x = Tensor(np.asarray(image, dtype=np.float64).reshape(
                1, cfg.C, cfg.H, cfg.W))
            for blk in self.enc:
                x = blk(x)
            for blk in self.pre:
                x = blk(x)
            n = cfg.grid_h * cfg.grid_w
            z_con = x[0].reshape(cfg.dim, n).transpose()
            qr = quantize(z_con, self.codebook, beta=cfg.beta)
            psi = nystrom_embed(qr.z_dis, self.nystrom)
            plans = [ot_align(psi, r, self.refs.epsilon, self.refs.iterations)
                     for r in self.refs.references]
            S = position_weights(n, cfg.t, self.refs.sigma_pos)
        return {"indices": qr.indices,
                "usage": codebook_usage(qr.indices, cfg.K),
                "plans": plans,
                "position_weights": S,
                "prediction": self.predict(image)}


def seg_loss(logits, labels, quant_loss, mode="softmax", dice_smooth=1e-5):
    """Cross-entropy + (1 - mean foreground soft Dice) + quantization loss.

    mode="per-class-bce" replaces the cross-entropy term with one-vs-rest
    binary cross entropy on per-class sigmoid outputs.
    """
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        labels = labels[None]
    bsz, classes, h, w = logits.shape
    if labels.shape != (bsz, h, w):
        raise ValueError(f"label shape {labels.shape} != {(bsz, h, w)}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError("label out of range")
    onehot = np.zeros((bsz, classes, h, w))
    np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
    y = Tensor(onehot)

    logp = logits - logsumexp(logits, axis=1, keepdims=True)
    if mode == "softmax":
        ce = -(y * logp).sum() * (1.0 / (bsz * h * w))
    elif mode == "per-class-bce":
        absx = logits.relu() + (-logits).relu()
        softplus = ((-absx).exp() + 1.0).log()
        ce = (logits.relu() - logits * y + softplus).mean()
    else:
        raise ValueError(f"unknown loss mode '{mode}'")

    probs = logp.exp()
    dices = []
    for c in range(1, classes):
        p_c = probs[:, c]
        y_c = y[:, c]
        inter = (p_c * y_c).sum()
        denom = p_c.sum() + y_c.sum()
        dices.append((inter * 2.0 + dice_smooth) / (denom + dice_smooth))
    dice = concat([d.reshape(1) for d in dices], axis=0).mean()
    total = ce + (1.0 - dice)
    if quant_loss is not None:
        total = total + quant_loss
    return total


class SgdMomentum:
    """Plain SGD with momentum; state keyed by parameter name."""

    def __init__(self, lr=0.05, momentum=0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params):
        for p in params:
            v = self.velocity.get(p.name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v - self.lr * p.grad
            self.velocity[p.name] = v
            p.data += v

    def state_dict(self):
        return {"lr": self.lr, "momentum": self.momentum,
                "velocity": dict(self.velocity)}


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.step_count += 1
        t = self.step_count
        for p in params:
            g = p.grad
            m = self.m.get(p.name)
            v = self.v.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[p.name] = m
            self.v[p.name] = v
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    log: list                      # rows of dicts per epoch
    checkpoint_path: str = ""


def warm_start(model, dataset, rng, batch=16):
    """Data-dependent initialization before the first step: k-means codebook
    from first-batch encoder features, anchors as a random subset of the
    quantized codes, kernel bandwidth by the median heuristic."""
    from . import autodiff as ad
    from .mapper import NystromEmbedding
    cfg = model.config
    idx = rng.permutation(len(dataset.samples))[:batch]
    images = np.stack([dataset.samples[i].image for i in idx]).astype(np.float64)
    with ad.no_grad():
        x = Tensor(images)
        for blk in model.enc:
            x = blk(x)
        for blk in model.pre:
            x = blk(x)
    feats = x.data.reshape(len(idx), cfg.dim, -1).transpose(0, 2, 1)
    feats = feats.reshape(-1, cfg.dim)
    model.codebook.kmeans_warmstart(feats, rng.spawn(21))
    codes = model.codebook.E.data
    emb = NystromEmbedding.from_batch(codes, cfg.k_a, rng.spawn(22))
    model.nystrom.anchors.data[...] = emb.anchors.data
    model.nystrom.sigma_k.data[...] = emb.sigma_k.data


def train(model, train_ds, val_ds=None, epochs=10, batch_size=8, lr=0.05,
          momentum=0.9, rng=None, optimizer=None, log_cb=None,
          start_epoch=0, check_finite=False, warmstart=True):
    """Minibatch training loop; returns per-epoch log rows.

    Deterministic given the rng seed: shuffling and all arithmetic are
    sequential and seeded. warmstart applies the data-dependent codebook and
    anchor initialization before the first step (skipped on resume).
    """
    from .metrics import evaluate_dataset
    rng = rng or Rng(0)
    if warmstart and start_epoch == 0:
        warm_start(model, train_ds, rng.spawn(77))
    opt = optimizer or SgdMomentum(lr=lr, momentum=momentum)
    params = model.parameters()
    log_rows = []
    prev_flag = autodiff.CHECK_FINITE
    autodiff.CHECK_FINITE = check_finite
    try:
        for epoch in range(start_epoch, start_epoch + epochs):
            t0 = time.time()
            order = rng.permutation(len(train_ds.samples))
            losses = []
            for s in range(0, len(order), batch_size):
                idx = order[s:s + batch_size]
                images = np.stack(
                    [train_ds.samples[i].image for i in idx]).astype(np.float64)
                labels = np.stack([train_ds.samples[i].labels for i in idx])
                model.zero_grad()
                try:
                    logits, qloss, _ = model.forward(images)
                    loss = seg_loss(logits, labels, qloss,
                                    mode=model.config.loss_mode)
                except FloatingPointError as e:
                    raise DivergenceError(
                        f"numerical failure at epoch {epoch}, "
                        f"step {s // batch_size}: {e}") from e
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, step {s // batch_size}")
                loss.backward()
                opt.step(params)
                losses.append(lv)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "val_dsc_mean": float("nan"), "val_hd_mean": float("nan"),
                   "wall_seconds": 0.0}
            if val_ds is not None:
                rep = evaluate_dataset(model, val_ds)
                row["val_dsc_mean"] = rep.mean_dsc
                row["val_hd_mean"] = rep.mean_hd
            row["wall_seconds"] = time.time() - t0
            log_rows.append(row)
            if log_cb:
                log_cb(row)
    finally:
        autodiff.CHECK_FINITE = prev_flag
    return TrainResult(log=log_rows), opt


# ---- checkpoint format -------------------------------------------------------

CKPT_MAGIC = b"L2GC"
CKPT_VERSION = 1


def save_checkpoint(path, model, optimizer=None, rng=None, epoch=0):
    """Binary checkpoint: magic, version, JSON header, named float64 blocks."""
    opt_header = None
    blocks = [("param:" + p.name, p.data) for p in model.parameters()]
    if isinstance(optimizer, Adam):
        opt_header = {"type": "adam", "lr": optimizer.lr,
                      "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                      "eps": optimizer.eps, "step_count": optimizer.step_count}
        for name in sorted(optimizer.m):
            blocks.append(("adam_m:" + name, optimizer.m[name]))
            blocks.append(("adam_v:" + name, optimizer.v[name]))
    elif optimizer is not None:
        opt_header = {"type": "sgd", "lr": optimizer.lr,
                      "momentum": optimizer.momentum}
        for name in sorted(optimizer.velocity):
            blocks.append(("mom:" + name, optimizer.velocity[name]))
    header = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "optimizer": opt_header,
        "rng_state": _jsonable(rng.state()) if rng else None,
    }
    hjson = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hjson)))
        f.write(hjson)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks:
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, rng=None):
    """Returns (model, optimizer, epoch); restores rng state in-place if given."""
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode())
        (nblocks,) = struct.unpack("<I", f.read(4))
        blocks = {}
        for _ in range(nblocks):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            blocks[name] = data.copy()
    config = ModelConfig.from_dict(header["config"])
    model = SegModel(config, Rng(0))
    for p in model.parameters():
        key = "param:" + p.name
        if key not in blocks:
            raise ValueError(f"checkpoint missing parameter block '{p.name}'")
        if blocks[key].shape != p.data.shape:
            raise ValueError(f"shape mismatch for '{p.name}'")
        p.data[...] = blocks[key]
    optimizer = None
    opt_header = header.get("optimizer")
    if opt_header:
        kind = opt_header.pop("type", "sgd")
        if kind == "adam":
            step_count = opt_header.pop("step_count", 0)
            optimizer = Adam(**opt_header)
            optimizer.step_count = step_count
            for name, arr in blocks.items():
                if name.startswith("adam_m:"):
                    optimizer.m[name[7:]] = arr
                elif name.startswith("adam_v:"):
                    optimizer.v[name[7:]] = arr
        else:
            optimizer = SgdMomentum(**opt_header)
            for name, arr in blocks.items():
                if name.startswith("mom:"):
                    optimizer.velocity[name[4:]] = arr
    if rng is not None and header.get("rng_state"):
        rng.set_state(_unjsonable(header["rng_state"]))
    return model, optimizer, header["epoch"]


def _jsonable(state):
    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__nd__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x
    return conv(state)


def _unjsonable(state):
    def conv(x):
        if isinstance(x, dict):
            if "__nd__" in x:
                return np.array(x["__nd__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(state)
