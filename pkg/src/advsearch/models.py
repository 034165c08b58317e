"""Baseline networks, the 8-operation cell search space, supernets with
architecture parameters, and genotype discretization/instantiation.

Cells follow the standard two-stem layout: 4 intermediate nodes, each fed by
exactly 2 (operation, predecessor) edges, output = channel concat of the four
node values. Reduction cells sit at floor(L/3) and floor(2L/3), double the
channel count, and apply stride 2 on edges reading from the two stems.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, ValidationError
from .util import hash_arrays, rng_from

OP_IDS = (
    "none", "max_pool_3x3", "avg_pool_3x3", "skip_connect",
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
)
N_NODES = 4
N_EDGES_PER_CELL = sum(i + 2 for i in range(N_NODES))  # 14 mixed edges
SUPERNET_MODES = ("darts", "fairdarts", "pcdarts", "nasp", "smoothdarts")


def _edge_offset(node):
    return node * (node + 3) // 2


def edge_index(node, src):
    return _edge_offset(node) + src


def _uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _walk(value, name, want):
    if isinstance(value, want[0]):
        yield name, value
    elif isinstance(value, Module):
        for key, val in vars(value).items():
            yield from _walk(val, f"{name}.{key}" if name else key, want)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}", want)


class Module:
    """Lightweight recursive parameter container."""

    def named_parameters(self, prefix=""):
        for name, t in _walk(self, prefix, (T.Tensor,)):
            if t.requires_grad:
                yield name, t

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def bn_states(self):
        return [s for _, s in _walk(self, "", (T.BatchNormState,))]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self):
        return int(sum(p.data.size for p in self.parameters()))


class Model(Module):
    """A network with an apply(x, train) forward returning [N, K] logits."""

    arch = "model"

    def apply(self, x, train=False):
        raise NotImplementedError

    def copy(self):
        return copy.deepcopy(self)

    def fingerprint(self):
        arrays = [p.data for _, p in sorted(self.named_parameters())]
        for st in self.bn_states():
            arrays.extend([st.mean, st.var])
        return hash_arrays(np.frombuffer(self.arch.encode(), dtype=np.uint8), *arrays)


# ---------------------------------------------------------------------------
# primitive layers


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        if n_in <= 0 or n_out <= 0:
            raise ArgumentError(f"zero-width linear layer: {n_in} -> {n_out}")
        self.w = T.Tensor(_uniform_fan_in(rng, (n_in, n_out), n_in), requires_grad=True)
        self.b = T.Tensor(_uniform_fan_in(rng, (n_out,), n_in), requires_grad=True)

    def __call__(self, x, train=False):
        return T.add(T.matmul(x, self.w), self.b)


class ConvBN(Module):
    """3x3 (or 1x1) convolution followed by batch normalization."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        pad = kernel // 2
        self.stride = stride
        self.pad = pad
        self.w = T.Tensor(
            _uniform_fan_in(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel),
            requires_grad=True)
        self.gamma = T.Tensor(np.ones(c_out), requires_grad=True)
        self.beta = T.Tensor(np.zeros(c_out), requires_grad=True)
        self.bn = T.BatchNormState(c_out)

    def __call__(self, x, train=False):
        out = T.conv2d(x, self.w, stride=self.stride, padding=self.pad)
        return T.batch_norm(out, self.gamma, self.beta, self.bn, train)


class ReluConvBN(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1):
        self.conv = ConvBN(c_in, c_out, kernel, rng, stride=stride)

    def __call__(self, x, train=False):
        return self.conv(T.relu(x), train)


# ---------------------------------------------------------------------------
# the eight cell operations


class ZeroOp(Module):
    def __init__(self, stride):
        self.stride = stride

    def __call__(self, x, train=False):
        return T.zero_like(x, stride=self.stride)


class PoolOp(Module):
    def __init__(self, kind, stride):
        self.kind = kind
        self.stride = stride

    def __call__(self, x, train=False):
        if self.kind == "max":
            return T.max_pool2d(x, 3, stride=self.stride, padding=1)
        return T.avg_pool2d(x, 3, stride=self.stride, padding=1)


class SkipOp(Module):
    def __init__(self, stride):
        self.stride = stride

    def __call__(self, x, train=False):
        if self.stride == 1:
            return T.identity(x)
        return T.strided_subsample(x, self.stride)


class SepConv(Module):
    """relu -> depthwise k x k -> pointwise 1x1 -> BN."""

    def __init__(self, c, kernel, stride, rng):
        self.stride = stride
        self.pad = kernel // 2
        self.dw = T.Tensor(_uniform_fan_in(rng, (c, kernel, kernel), kernel * kernel),
                           requires_grad=True)
        self.pw = T.Tensor(_uniform_fan_in(rng, (c, c, 1, 1), c), requires_grad=True)
        self.gamma = T.Tensor(np.ones(c), requires_grad=True)
        self.beta = T.Tensor(np.zeros(c), requires_grad=True)
        self.bn = T.BatchNormState(c)

    def __call__(self, x, train=False):
        out = T.depthwise_conv2d(T.relu(x), self.dw, stride=self.stride, padding=self.pad)
        out = T.conv2d(out, self.pw)
        return T.batch_norm(out, self.gamma, self.beta, self.bn, train)


class DilConv(Module):
    """relu -> dilated depthwise (dilation 2) -> pointwise 1x1 -> BN."""

    def __init__(self, c, kernel, stride, rng):
        self.stride = stride
        self.pad = kernel - 1
        self.dw = T.Tensor(_uniform_fan_in(rng, (c, kernel, kernel), kernel * kernel),
                           requires_grad=True)
        self.pw = T.Tensor(_uniform_fan_in(rng, (c, c, 1, 1), c), requires_grad=True)
        self.gamma = T.Tensor(np.ones(c), requires_grad=True)
        self.beta = T.Tensor(np.zeros(c), requires_grad=True)
        self.bn = T.BatchNormState(c)

    def __call__(self, x, train=False):
        out = T.depthwise_conv2d(T.relu(x), self.dw, stride=self.stride, padding=self.pad,
                                 dilation=2)
        out = T.conv2d(out, self.pw)
        return T.batch_norm(out, self.gamma, self.beta, self.bn, train)


def make_op(name, c, stride, rng):
    if name == "none":
        return ZeroOp(stride)
    if name == "max_pool_3x3":
        return PoolOp("max", stride)
    if name == "avg_pool_3x3":
        return PoolOp("avg", stride)
    if name == "skip_connect":
        return SkipOp(stride)
    if name == "sep_conv_3x3":
        return SepConv(c, 3, stride, rng)
    if name == "sep_conv_5x5":
        return SepConv(c, 5, stride, rng)
    if name == "dil_conv_3x3":
        return DilConv(c, 3, stride, rng)
    if name == "dil_conv_5x5":
        return DilConv(c, 5, stride, rng)
    raise ConfigError(f"unknown cell operation: {name!r}")


# ---------------------------------------------------------------------------
# genotypes


@dataclass(frozen=True)
class Genotype:
    """Discrete cell description: 8 (op, source) edges per cell type, listed
    node by node (node i owns entries 2i and 2i+1, sources in 0..i+1)."""

    normal: tuple
    reduction: tuple

    def __post_init__(self):
        for label, edges in (("normal", self.normal), ("reduction", self.reduction)):
            problems = []
            if len(edges) != 2 * N_NODES:
                problems.append(f"{label}: expected {2 * N_NODES} edges, got {len(edges)}")
            else:
                for i, (op, src) in enumerate(edges):
                    node = i // 2
                    if op not in OP_IDS:
                        problems.append(f"{label}[{i}]: unknown op {op!r}")
                    if not 0 <= int(src) < node + 2:
                        problems.append(f"{label}[{i}]: source {src} invalid for node {node}")
            if problems:
                raise ValidationError(problems)
        object.__setattr__(self, "normal", tuple((op, int(src)) for op, src in self.normal))
        object.__setattr__(self, "reduction", tuple((op, int(src)) for op, src in self.reduction))

    def to_json(self):
        return json.dumps({
            "normal": [[op, src] for op, src in self.normal],
            "reduction": [[op, src] for op, src in self.reduction],
        })

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        return cls(tuple((op, src) for op, src in raw["normal"]),
                   tuple((op, src) for op, src in raw["reduction"]))

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())


def random_genotype(rng):
    def cell():
        edges = []
        for node in range(N_NODES):
            for _ in range(2):
                op = OP_IDS[1 + int(rng.integers(0, len(OP_IDS) - 1))]  # no "none"
                src = int(rng.integers(0, node + 2))
                edges.append((op, src))
        return tuple(edges)

    return Genotype(cell(), cell())


ALL_SKIP_GENOTYPE = Genotype(
    tuple(("skip_connect", min(1, i // 2)) for i in range(8)),
    tuple(("skip_connect", min(1, i // 2)) for i in range(8)),
)


# ---------------------------------------------------------------------------
# baseline networks


class MLP(Model):
    arch = "mlp"

    def __init__(self, layer_sizes, seed=0):
        if len(layer_sizes) < 3:
            raise ArgumentError("build_mlp needs at least one hidden layer")
        if any(s <= 0 for s in layer_sizes):
            raise ArgumentError(f"zero-width layer in {layer_sizes}")
        rng = rng_from(seed, "mlp")
        self.layers = [Linear(layer_sizes[i], layer_sizes[i + 1], rng)
                       for i in range(len(layer_sizes) - 1)]
        self.arch = f"mlp{tuple(layer_sizes)}"

    def apply(self, x, train=False):
        out = T.as_tensor(x)
        for layer in self.layers[:-1]:
            out = T.relu(layer(out, train))
        return self.layers[-1](out, train)


class CNN(Model):
    """Two conv blocks with a pooled downsample, the shapes-dataset baseline."""

    arch = "cnn"

    def __init__(self, channels, n_classes, in_channels=1, seed=0):
        if channels <= 0 or n_classes <= 0:
            raise ArgumentError("zero-width layer in CNN")
        rng = rng_from(seed, "cnn")
        self.block1 = ConvBN(in_channels, channels, 3, rng)
        self.block2 = ConvBN(channels, 2 * channels, 3, rng)
        self.head = Linear(2 * channels, n_classes, rng)
        self.arch = f"cnn(C={channels},K={n_classes},in={in_channels})"

    def apply(self, x, train=False):
        out = T.relu(self.block1(T.as_tensor(x), train))
        out = T.max_pool2d(out, 3, stride=2, padding=1)
        out = T.relu(self.block2(out, train))
        return self.head(T.global_avg_pool(out), train)


def build_mlp(layer_sizes, seed=0):
    return MLP(layer_sizes, seed)


def build_cnn(channels, n_classes, in_channels=1, seed=0):
    return CNN(channels, n_classes, in_channels, seed)


# ---------------------------------------------------------------------------
# fixed cell networks


class FixedCell(Module):
    def __init__(self, edges, c_pp, c_p, c, reduction, reduction_prev, rng):
        self.pre0 = ReluConvBN(c_pp, c, 1, rng, stride=2 if reduction_prev else 1)
        self.pre1 = ReluConvBN(c_p, c, 1, rng)
        self.edges = list(edges)
        self.ops = []
        for i, (op, src) in enumerate(edges):
            stride = 2 if reduction and src < 2 else 1
            self.ops.append(make_op(op, c, stride, rng))

    def __call__(self, s0, s1, train=False):
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        for node in range(N_NODES):
            a = self.ops[2 * node](states[self.edges[2 * node][1]], train)
            b = self.ops[2 * node + 1](states[self.edges[2 * node + 1][1]], train)
            states.append(T.add(a, b))
        return T.concat(states[2:], axis=1)


def _reduction_layers(length):
    return {length // 3, 2 * length // 3}


class CellNetwork(Model):
    arch = "cellnet"

    def __init__(self, genotype, C, L, n_classes, in_channels=1, seed=0):
        if C < 4:
            raise ArgumentError(f"C must be >= 4, got {C}")
        if L < 2:
            raise ArgumentError(f"L must be >= 2, got {L}")
        rng = rng_from(seed, "cellnet")
        self.genotype = genotype
        self.stem = ConvBN(in_channels, C, 3, rng)
        reductions = _reduction_layers(L)
        self.cells = []
        c_pp = c_p = C
        c_curr = C
        reduction_prev = False
        for i in range(L):
            reduction = i in reductions
            if reduction:
                c_curr *= 2
            edges = genotype.reduction if reduction else genotype.normal
            cell = FixedCell(edges, c_pp, c_p, c_curr, reduction, reduction_prev, rng)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, N_NODES * c_curr
        self.head = Linear(c_p, n_classes, rng)
        self.arch = f"cellnet(C={C},L={L},K={n_classes},geno={genotype.to_json()})"

    def apply(self, x, train=False):
        s0 = s1 = self.stem(T.as_tensor(x), train)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, train)
        return self.head(T.global_avg_pool(s1), train)


def instantiate_genotype(genotype, C, L, n_classes, in_channels=1, seed=0):
    return CellNetwork(genotype, C, L, n_classes, in_channels, seed)


# ---------------------------------------------------------------------------
# supernet


class MixedEdge(Module):
    """All eight candidate operations on one edge, mixed by per-op weights."""

    def __init__(self, c, stride, rng, channel_fraction=None):
        self.stride = stride
        self.masked = c if channel_fraction is None else int(np.ceil(c * channel_fraction))
        self.total = c
        self.ops = [make_op(name, self.masked, stride, rng) for name in OP_IDS]

    def __call__(self, x, weights, train=False):
        """weights: taped tensor of 8 op weights."""
        if self.masked == self.total:
            parts = [T.mul(op(x, train), T.index1d(weights, o))
                     for o, op in enumerate(self.ops)]
            return T.add_n(parts)
        xa = T.channel_slice(x, 0, self.masked)
        xb = T.channel_slice(x, self.masked, self.total)
        parts = [T.mul(op(xa, train), T.index1d(weights, o))
                 for o, op in enumerate(self.ops)]
        mixed = T.add_n(parts)
        bypass = xb if self.stride == 1 else T.strided_subsample(xb, self.stride)
        return T.concat([mixed, bypass], axis=1)

    def path(self, x, op_name, train=False):
        """Single-op forward used by path-sampled (weight sharing) training."""
        op = self.ops[OP_IDS.index(op_name)]
        if self.masked == self.total:
            return op(x, train)
        xa = T.channel_slice(x, 0, self.masked)
        xb = T.channel_slice(x, self.masked, self.total)
        out = op(xa, train)
        bypass = xb if self.stride == 1 else T.strided_subsample(xb, self.stride)
        return T.concat([out, bypass], axis=1)


class MixedCell(Module):
    def __init__(self, c_pp, c_p, c, reduction, reduction_prev, rng, channel_fraction=None):
        self.reduction = reduction
        self.pre0 = ReluConvBN(c_pp, c, 1, rng, stride=2 if reduction_prev else 1)
        self.pre1 = ReluConvBN(c_p, c, 1, rng)
        self.edges = []
        for node in range(N_NODES):
            for src in range(node + 2):
                stride = 2 if reduction and src < 2 else 1
                self.edges.append(MixedEdge(c, stride, rng, channel_fraction))

    def forward_mixed(self, s0, s1, weights, beta_weights, train=False):
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        for node in range(N_NODES):
            acc = []
            for src in range(node + 2):
                e = edge_index(node, src)
                out = self.edges[e](states[src], weights[e], train)
                if beta_weights is not None:
                    out = T.mul(out, beta_weights[e])
                acc.append(out)
            states.append(T.add_n(acc))
        return T.concat(states[2:], axis=1)

    def forward_path(self, s0, s1, edges, train=False):
        states = [self.pre0(s0, train), self.pre1(s1, train)]
        for node in range(N_NODES):
            acc = []
            for k in range(2):
                op, src = edges[2 * node + k]
                e = edge_index(node, src)
                acc.append(self.edges[e].path(states[src], op, train))
            states.append(T.add_n(acc))
        return T.concat(states[2:], axis=1)


class SuperNet(Model):
    """Weight-sharing network whose edges mix all candidate operations.

    darts/nasp/smoothdarts mix with softmax(alpha); fairdarts gates each op
    independently with sigmoid(alpha); pcdarts masks a channel fraction
    through the mixed op, bypasses the rest, and weights each edge by
    edge-normalization parameters beta (scaled so an untrained supernet
    computes the same function as darts mode).
    """

    arch = "supernet"

    def __init__(self, mode, C, L, n_classes, in_channels=1, channel_fraction=0.5, seed=0):
        if mode not in SUPERNET_MODES:
            raise ConfigError(f"unknown supernet mode: {mode!r}")
        if C < 4:
            raise ArgumentError(f"C must be >= 4, got {C}")
        if L < 2:
            raise ArgumentError(f"L must be >= 2, got {L}")
        if mode == "pcdarts" and not 0.0 < channel_fraction <= 1.0:
            raise ArgumentError(f"channel_fraction must be in (0, 1], got {channel_fraction}")
        rng = rng_from(seed, "supernet")
        self.mode = mode
        self.C = C
        self.L = L
        self.n_classes = n_classes
        self.channel_fraction = channel_fraction if mode == "pcdarts" else None
        self.stem = ConvBN(in_channels, C, 3, rng)
        reductions = _reduction_layers(L)
        self.cells = []
        c_pp = c_p = C
        c_curr = C
        reduction_prev = False
        for i in range(L):
            reduction = i in reductions
            if reduction:
                c_curr *= 2
            cell = MixedCell(c_pp, c_p, c_curr, reduction, reduction_prev, rng,
                             self.channel_fraction)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, N_NODES * c_curr
        self.head = Linear(c_p, n_classes, rng)
        init = 1e-3 * rng.standard_normal((2, N_EDGES_PER_CELL, len(OP_IDS)))
        if mode == "nasp":
            init = 0.5 + np.abs(init)  # NASP keeps alpha inside [0, 1]
        self.alpha = [
            [T.Tensor(init[t, e].copy(), requires_grad=True) for e in range(N_EDGES_PER_CELL)]
            for t in range(2)
        ]
        if mode == "pcdarts":
            self.beta = [
                [T.Tensor(np.zeros(node + 2), requires_grad=True) for node in range(N_NODES)]
                for _ in range(2)
            ]
        else:
            self.beta = None
        self.arch = f"supernet({mode},C={C},L={L},K={n_classes})"

    def arch_parameters(self):
        out = [a for group in self.alpha for a in group]
        if self.beta is not None:
            out.extend(b for group in self.beta for b in group)
        return out

    def weight_parameters(self):
        arch_ids = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch_ids]

    def _edge_weights(self, cell_type, alpha_override=None, alpha_shift=None):
        """Taped per-edge mixing weight tensors for one cell type."""
        weights = []
        for e in range(N_EDGES_PER_CELL):
            a = self.alpha[cell_type][e] if alpha_override is None else alpha_override[cell_type][e]
            if alpha_shift is not None:
                a = T.add(a, alpha_shift[cell_type][e])
            if self.mode == "fairdarts":
                weights.append(T.sigmoid(a))
            elif alpha_override is not None:
                weights.append(a)  # already discrete weights (nasp step)
            else:
                weights.append(T.softmax(a, axis=-1))
        return weights

    def _beta_weights(self, cell_type):
        if self.beta is None:
            return None
        out = [None] * N_EDGES_PER_CELL
        for node in range(N_NODES):
            n_in = node + 2
            soft = T.softmax(self.beta[cell_type][node], axis=-1)
            for src in range(n_in):
                # scaled so uniform beta gives weight 1.0 per edge
                out[edge_index(node, src)] = T.scale(T.index1d(soft, src), float(n_in))
        return out

    def apply(self, x, train=False, alpha_override=None, alpha_shift=None, genotype=None):
        s0 = s1 = self.stem(T.as_tensor(x), train)
        for cell in self.cells:
            ct = 1 if cell.reduction else 0
            if genotype is not None:
                edges = genotype.reduction if cell.reduction else genotype.normal
                s0, s1 = s1, cell.forward_path(s0, s1, edges, train)
            else:
                w = self._edge_weights(ct, alpha_override, alpha_shift)
                bw = self._beta_weights(ct)
                s0, s1 = s1, cell.forward_mixed(s0, s1, w, bw, train)
        return self.head(T.global_avg_pool(s1), train)


def build_supernet(mode, C, L, n_classes, in_channels=1, channel_fraction=0.5, seed=0):
    return SuperNet(mode, C, L, n_classes, in_channels, channel_fraction, seed)


# ---------------------------------------------------------------------------
# discretization


def _discretize_weights(edge_weights, fair_threshold=False):
    """Pick 2 edges per node, keeping each edge's best non-none op.

    edge_weights: [N_EDGES, n_ops] numpy scores. Ties break toward the lower
    (edge index, op index).
    """
    chosen = []
    for node in range(N_NODES):
        cand = []
        for src in range(node + 2):
            e = edge_index(node, src)
            w = edge_weights[e]
            best_op = 1 + int(np.argmax(w[1:]))  # skip "none"
            cand.append((e, src, best_op, w[best_op]))
        if fair_threshold:
            passing = [c for c in cand if c[3] >= 0.5]
            pool = passing if len(passing) >= 2 else cand
        else:
            pool = cand
        pool = sorted(pool, key=lambda c: (-c[3], c[0]))[:2]
        pool = sorted(pool, key=lambda c: c[0])
        for e, src, best_op, _ in pool:
            chosen.append((OP_IDS[best_op], src))
    return tuple(chosen)


def genotype_from_alpha(supernet):
    """Discretize a supernet's architecture parameters into a Genotype."""
    cells = []
    for ct in range(2):
        scores = np.zeros((N_EDGES_PER_CELL, len(OP_IDS)))
        for e in range(N_EDGES_PER_CELL):
            a = supernet.alpha[ct][e].data
            if supernet.mode == "fairdarts":
                scores[e] = 1.0 / (1.0 + np.exp(-a))
            else:
                ex = np.exp(a - a.max())
                scores[e] = ex / ex.sum()
        if supernet.mode == "pcdarts":
            for node in range(N_NODES):
                b = supernet.beta[ct][node].data
                soft = np.exp(b - b.max())
                soft /= soft.sum()
                for src in range(node + 2):
                    scores[edge_index(node, src)] *= soft[src]
        cells.append(_discretize_weights(scores, fair_threshold=supernet.mode == "fairdarts"))
    return Genotype(cells[0], cells[1])
