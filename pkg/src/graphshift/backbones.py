"""Three graph classifiers sharing one interface: message passing with a
virtual node (vgin), pure masked multi-head attention over nodes (mha), and a
hybrid layer summing both branches (gps).

Every model maps a GraphBatch (plus optional random-walk encodings) to
per-graph logits and exposes the pooled penultimate representation, which the
analysis side of the package consumes. Parameters are plain Tensors collected
in declared order so checkpoints serialize as one JSON manifest plus one
little-endian float64 blob.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_cols,
    dropout,
    gather_rows,
    matmul,
    mul,
    relu,
    softmax_rows,
    transpose,
)
from .autodiff import batchnorm as batchnorm_op
from .errors import ConfigError, ContractError, ShapeError

BACKBONE_KINDS = ("vgin", "mha", "gps")
RW_MODES = ("auto", "always", "never")

# (num_layers, hidden_width) pairs calibrated so trainable parameter counts
# stay within 15% of each other at each scale. "desk" trains in minutes on
# one core; "full" keeps the 300-wide shapes for fidelity runs.
DESK_SHAPES = {"vgin": (3, 104), "mha": (4, 84), "gps": (6, 48)}
FULL_SHAPES = {"vgin": (4, 300), "mha": (5, 300), "gps": (10, 300)}


@dataclass
class BackboneConfig:
    kind: str
    num_layers: int
    hidden_width: int = 300
    num_heads: int = 4
    dropout: float = 0.5
    use_batchnorm: bool = True
    rw_steps: int = 5
    num_classes: int = 3
    rw_mode: str = "auto"

    def validate(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}",
                              path="backbone.kind")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}",
                              path="backbone.num_layers")
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be >= 1, got {self.hidden_width}",
                              path="backbone.hidden_width")
        if self.hidden_width % self.num_heads != 0:
            raise ConfigError(
                f"hidden_width {self.hidden_width} not divisible by "
                f"num_heads {self.num_heads}",
                path="backbone.num_heads",
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}",
                              path="backbone.dropout")
        if self.rw_steps < 1:
            raise ConfigError(f"rw_steps must be >= 1, got {self.rw_steps}",
                              path="backbone.rw_steps")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}",
                              path="backbone.num_classes")
        if self.rw_mode not in RW_MODES:
            raise ConfigError(f"unknown rw_mode {self.rw_mode!r}",
                              path="backbone.rw_mode")
        return self

    @property
    def uses_rw(self):
        if self.rw_mode == "always":
            return True
        if self.rw_mode == "never":
            return False
        return self.kind in ("mha", "gps")


def default_backbone_config(kind, scale="desk", num_classes=3, **overrides):
    shapes = DESK_SHAPES if scale == "desk" else FULL_SHAPES
    if scale not in ("desk", "full"):
        raise ConfigError(f"unknown scale {scale!r}", path="backbone.scale")
    if kind not in shapes:
        raise ConfigError(f"unknown backbone kind {kind!r}", path="backbone.kind")
    layers, width = shapes[kind]
    cfg = BackboneConfig(kind=kind, num_layers=layers, hidden_width=width,
                         num_classes=num_classes)
    for key, val in overrides.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown backbone field {key!r}", path=f"backbone.{key}")
        setattr(cfg, key, val)
    return cfg.validate()


@dataclass
class ModelOutput:
    logits: Tensor       # [num_graphs, num_classes]
    penultimate: Tensor  # [num_graphs, hidden_width], pooled, pre-head


# ------------------------------------------------------------------ components


def _kaiming_uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, d_in, d_out, rng, name):
        self.name = name
        self.weight = Tensor(_kaiming_uniform(rng, d_in, (d_in, d_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)

    def params(self):
        return [(self.name + ".weight", self.weight), (self.name + ".bias", self.bias)]

    def buffers(self):
        return []


class BatchNorm:
    def __init__(self, width, name):
        self.name = name
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def __call__(self, x, train):
        return batchnorm_op(x, self.gamma, self.beta,
                            self.running_mean, self.running_var, train)

    def params(self):
        return [(self.name + ".gamma", self.gamma), (self.name + ".beta", self.beta)]

    def buffers(self):
        return [(self.name + ".running_mean", self.running_mean),
                (self.name + ".running_var", self.running_var)]


class Identity:
    """Stand-in for BatchNorm when normalization is ablated."""

    def __call__(self, x, train):
        return x

    def params(self):
        return []

    def buffers(self):
        return []


def _norm(width, use_bn, name):
    return BatchNorm(width, name) if use_bn else Identity()


class GinLayer:
    """h'_v = MLP((1 + eps) h_v + sum of neighbor h_u), MLP = lin-bn-relu-lin."""

    def __init__(self, width, use_bn, rng, name):
        self.name = name
        self.eps = Tensor(0.0, requires_grad=True)
        self.lin1 = Linear(width, width, rng, name + ".mlp.lin1")
        self.norm = _norm(width, use_bn, name + ".mlp.norm")
        self.lin2 = Linear(width, width, rng, name + ".mlp.lin2")

    def __call__(self, x, batch, train):
        agg = matmul(Tensor(batch.adjacency), x)
        pre = add(add(x, mul(x, self.eps)), agg)
        return self.lin2(relu(self.norm(self.lin1(pre), train)))

    def params(self):
        return ([(self.name + ".eps", self.eps)] + self.lin1.params()
                + self.norm.params() + self.lin2.params())

    def buffers(self):
        return self.norm.buffers()


class VirtualNode:
    """Per-graph global state exchanged with node features between layers."""

    def __init__(self, width, rng, name):
        self.name = name
        self.lin1 = Linear(width, width, rng, name + ".lin1")
        self.lin2 = Linear(width, width, rng, name + ".lin2")

    def step(self, x, batch, vstate, train):
        v_in = add(vstate, matmul(Tensor(batch.pool_sum), x))
        v_new = self.lin2(relu(self.lin1(v_in)))
        x_new = add(x, gather_rows(v_new, batch.graph_index))
        return x_new, v_new

    def params(self):
        return self.lin1.params() + self.lin2.params()

    def buffers(self):
        return []


class AttentionCore:
    """Masked multi-head self-attention over the nodes of each graph.

    The additive mask (-1e30 across graphs) underflows to exactly zero after
    the row-max-shifted softmax, so no attention mass ever crosses graphs.
    """

    def __init__(self, width, heads, rng, name):
        self.name = name
        self.heads = heads
        self.head_dim = width // heads
        self.wq = [Linear(width, self.head_dim, rng, f"{name}.h{i}.wq")
                   for i in range(heads)]
        self.wk = [Linear(width, self.head_dim, rng, f"{name}.h{i}.wk")
                   for i in range(heads)]
        self.wv = [Linear(width, self.head_dim, rng, f"{name}.h{i}.wv")
                   for i in range(heads)]
        self.wo = Linear(width, width, rng, name + ".wo")

    def __call__(self, x, batch):
        scale = 1.0 / math.sqrt(self.head_dim)
        bias = Tensor(batch.attention_bias)
        outs = []
        for i in range(self.heads):
            # scale folded into q: same math, one fewer [N, N] temporary
            q = mul(self.wq[i](x), scale)
            k = self.wk[i](x)
            v = self.wv[i](x)
            scores = add(matmul(q, transpose(k)), bias)
            outs.append(matmul(softmax_rows(scores), v))
        return self.wo(concat_cols(outs))

    def attention_weights(self, x_np, batch):
        """Eval-time attention matrices [heads, n, n] for inspection."""
        x = np.asarray(x_np)
        scale = 1.0 / math.sqrt(self.head_dim)
        mats = []
        for i in range(self.heads):
            q = x @ self.wq[i].weight.data + self.wq[i].bias.data
            k = x @ self.wk[i].weight.data + self.wk[i].bias.data
            s = q @ k.T * scale + batch.attention_bias
            s = s - s.max(axis=1, keepdims=True)
            e = np.exp(s)
            mats.append(e / e.sum(axis=1, keepdims=True))
        return np.stack(mats)

    def params(self):
        out = []
        for group in (self.wq, self.wk, self.wv):
            for lin in group:
                out.extend(lin.params())
        out.extend(self.wo.params())
        return out

    def buffers(self):
        return []


class MhaLayer:
    """Attention block: x + dropout(attention(x)), then batchnorm."""

    def __init__(self, width, heads, drop_rate, use_bn, rng, name):
        self.name = name
        self.core = AttentionCore(width, heads, rng, name + ".attn")
        self.drop_rate = drop_rate
        self.norm = _norm(width, use_bn, name + ".norm")

    def attention(self, x, batch):
        return self.core(x, batch)

    def __call__(self, x, batch, train, rng):
        a = dropout(self.core(x, batch), self.drop_rate, rng, train)
        return self.norm(add(x, a), train)

    def params(self):
        return self.core.params() + self.norm.params()

    def buffers(self):
        return self.norm.buffers()


class GpsLayer:
    """Hybrid block: x + dropout(MLP(gin(x) + attention(x))), then batchnorm.

    Zeroing the attention output projection reduces the block to the message
    passing branch and vice versa, which the tests exercise directly.
    """

    def __init__(self, width, heads, drop_rate, use_bn, rng, name):
        self.name = name
        self.gin = GinLayer(width, use_bn, rng, name + ".gin")
        self.core = AttentionCore(width, heads, rng, name + ".attn")
        self.fuse1 = Linear(width, width, rng, name + ".fuse.lin1")
        self.fuse2 = Linear(width, width, rng, name + ".fuse.lin2")
        self.drop_rate = drop_rate
        self.norm = _norm(width, use_bn, name + ".norm")

    def __call__(self, x, batch, train, rng):
        xm = self.gin(x, batch, train)
        xt = self.core(x, batch)
        fused = self.fuse2(relu(self.fuse1(add(xm, xt))))
        fused = dropout(fused, self.drop_rate, rng, train)
        return self.norm(add(x, fused), train)

    def params(self):
        return (self.gin.params() + self.core.params() + self.fuse1.params()
                + self.fuse2.params() + self.norm.params())

    def buffers(self):
        return self.gin.buffers() + self.norm.buffers()


# ----------------------------------------------------------------------- model


class Model:
    """Input projection, a stack of backbone layers, mean pooling, linear head."""

    def __init__(self, cfg, input_dim, rng):
        cfg.validate()
        if input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {input_dim}",
                              path="backbone.input_dim")
        self.cfg = cfg
        self.input_dim = input_dim
        h = cfg.hidden_width
        proj_in = input_dim + (cfg.rw_steps if cfg.uses_rw else 0)
        self.input_proj = Linear(proj_in, h, rng, "input_proj")
        self.layers = []
        self.vnodes = []
        if cfg.kind == "vgin":
            self.layers = [GinLayer(h, cfg.use_batchnorm, rng, f"layer{i}")
                           for i in range(cfg.num_layers)]
            self.vnodes = [VirtualNode(h, rng, f"vnode{i}")
                           for i in range(cfg.num_layers - 1)]
        elif cfg.kind == "mha":
            self.layers = [
                MhaLayer(h, cfg.num_heads, cfg.dropout, cfg.use_batchnorm, rng,
                         f"layer{i}")
                for i in range(cfg.num_layers)
            ]
        else:
            self.layers = [
                GpsLayer(h, cfg.num_heads, cfg.dropout, cfg.use_batchnorm, rng,
                         f"layer{i}")
                for i in range(cfg.num_layers)
            ]
        self.head = Linear(h, cfg.num_classes, rng, "head")

    # -- forward -----------------------------------------------------------

    def _input_matrix(self, batch, rw):
        feats = batch.features
        if feats.shape[1] != self.input_dim:
            raise ConfigError(
                f"batch feature width {feats.shape[1]} does not match "
                f"model input_dim {self.input_dim}",
                path="backbone.input_dim",
            )
        if self.cfg.uses_rw:
            if rw is None:
                raise ContractError("model configured for rw encodings, none given")
            rw = np.asarray(rw)
            if rw.shape != (feats.shape[0], self.cfg.rw_steps):
                raise ShapeError(
                    f"rw encoding shape {rw.shape}, want "
                    f"({feats.shape[0]}, {self.cfg.rw_steps})"
                )
            feats = np.concatenate([feats, rw], axis=1)
        return feats

    def forward(self, batch, rw=None, train=False, rng=None):
        if train and self.cfg.dropout > 0.0 and rng is None:
            raise ContractError("training forward needs an rng for dropout")
        x = self.input_proj(Tensor(self._input_matrix(batch, rw)))
        if self.cfg.kind == "vgin":
            vstate = Tensor(np.zeros((batch.num_graphs, self.cfg.hidden_width)))
            for i, layer in enumerate(self.layers):
                x = layer(x, batch, train)
                x = dropout(x, self.cfg.dropout, rng, train)
                if i < len(self.vnodes):
                    x, vstate = self.vnodes[i].step(x, batch, vstate, train)
        else:
            for layer in self.layers:
                x = layer(x, batch, train, rng)
        pooled = matmul(Tensor(batch.pool_mean), x)
        return ModelOutput(logits=self.head(pooled), penultimate=pooled)

    def head_logits(self, pooled):
        """Final classifier on externally supplied pooled representations."""
        return self.head(pooled)

    # -- parameter bookkeeping ---------------------------------------------

    def _components(self):
        comps = [self.input_proj]
        if self.cfg.kind == "vgin":
            # interleave so declared order follows the forward pass
            for i, layer in enumerate(self.layers):
                comps.append(layer)
                if i < len(self.vnodes):
                    comps.append(self.vnodes[i])
        else:
            comps.extend(self.layers)
        comps.append(self.head)
        return comps

    def named_parameters(self):
        out = []
        for comp in self._components():
            out.extend(comp.params())
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        out = []
        for comp in self._components():
            out.extend(comp.buffers())
        return out


def count_parameters(model):
    return int(sum(p.size for _, p in model.named_parameters()))


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_FORMAT = "graph-backbone-checkpoint-v1"


def save_checkpoint(model, path, seed=None, epoch=None, id_val_accuracy=None):
    """Write `path` (JSON manifest) plus a sibling .bin blob of '<f8' arrays."""
    if not path.endswith(".json"):
        raise ConfigError(f"checkpoint path must end in .json, got {path}",
                          path="checkpoint")
    blob_path = path[:-5] + ".bin"
    entries = []
    chunks = []
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(np.shape(p.data)),
                        "trainable": True})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    for name, arr in model.named_buffers():
        entries.append({"name": name, "shape": list(arr.shape), "trainable": False})
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.cfg),
        "input_dim": model.input_dim,
        "seed": seed,
        "epoch": epoch,
        "id_val_accuracy": id_val_accuracy,
        "dtype": "<f8",
        "blob": os.path.basename(blob_path),
        "entries": entries,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild the model a manifest describes and fill it from the blob."""
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"not a model checkpoint: {path}")
    cfg = BackboneConfig(**manifest["config"]).validate()
    # init values are irrelevant: every array is overwritten from the blob
    model = Model(cfg, int(manifest["input_dim"]), np.random.default_rng(0))
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)),
                             manifest["blob"])
    raw = np.fromfile(blob_path, dtype="<f8")
    targets = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    offset = 0
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        block = raw[offset : offset + size]
        if block.size != size:
            raise ContractError(f"checkpoint blob truncated at {entry['name']}")
        offset += size
        if entry["trainable"]:
            tgt = targets.get(entry["name"])
            if tgt is None or tuple(np.shape(tgt.data)) != shape:
                raise ContractError(
                    f"checkpoint entry {entry['name']} does not match model"
                )
            tgt.data = block.reshape(shape).astype(np.float64).copy()
        else:
            buf = buffers.get(entry["name"])
            if buf is None or buf.shape != shape:
                raise ContractError(
                    f"checkpoint entry {entry['name']} does not match model"
                )
            buf[...] = block.reshape(shape)
    if offset != raw.size:
        raise ContractError("checkpoint blob has trailing data")
    return model, manifest
