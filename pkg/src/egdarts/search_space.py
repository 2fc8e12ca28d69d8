"""Candidate operations, cell DAGs with softmax-mixed edges, pruning and genotypes."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import BatchNorm2d, Conv2d, Module

CELL_TYPES = ("normal", "reduce")
DEFAULT_NUM_NODES = 7  # two inputs, four intermediates, one output

Edge = tuple[int, int]


class CandidateOp(str, enum.Enum):
    SKIP_CONNECT = "skip_connect"
    MAX_POOL_3X3 = "max_pool_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    ECA_NET_3X3 = "eca_net_3x3"
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    SEP_CONV_7X7 = "sep_conv_7x7"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    LBCNN_3X3 = "lbcnn_3x3"
    LBCNN_5X5 = "lbcnn_5x5"
    CONV_7X1_1X7 = "conv_7x1_1x7"

    def __str__(self) -> str:
        return self.value

    @property
    def kernel(self) -> int:
        return _KERNELS[self]


_KERNELS = {op: (1 if op is CandidateOp.SKIP_CONNECT else 7 if op is CandidateOp.CONV_7X1_1X7
                 else int(op.value.rsplit("_", 1)[1][0])) for op in CandidateOp}

ALL_OPS: tuple[CandidateOp, ...] = tuple(CandidateOp)
PARAMETER_FREE = frozenset({CandidateOp.SKIP_CONNECT, CandidateOp.MAX_POOL_3X3, CandidateOp.AVG_POOL_3X3})


def parse_op(name) -> CandidateOp:
    try:
        return CandidateOp(str(name))
    except ValueError:
        raise ValueError(f"unknown operation {name!r}") from None


# parameter and FLOP formulas ---------------------------------------------------

def op_param_count(op: CandidateOp, c_in: int, c_out: int) -> int:
    """Trainable scalars allocated by one instance of ``op``."""
    if c_in < 1 or c_out < 1:
        raise ValueError(f"channel counts must be >= 1, got {c_in}, {c_out}")
    op = parse_op(op)
    k = op.kernel
    if op in PARAMETER_FREE:
        return 0
    if op is CandidateOp.ECA_NET_3X3:
        return 3
    if op.value.startswith("sep_conv"):
        # (depthwise, pointwise) twice; the first pass maps c_in -> c_out
        return c_in * k * k + c_in * c_out + c_out * k * k + c_out * c_out
    if op.value.startswith("dil_conv"):
        return c_in * k * k + c_in * c_out
    if op.value.startswith("lbcnn"):
        return c_in * c_out  # the k x k binary kernel is frozen
    if op is CandidateOp.CONV_7X1_1X7:
        return 7 * c_in * c_out + 7 * c_out * c_out
    raise AssertionError(op)


def _out(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


def conv_flops(k_h: int, k_w: int, c_in: int, c_out: int, groups: int, h_out: int, w_out: int) -> int:
    return 2 * k_h * k_w * (c_in // groups) * c_out * h_out * w_out


def op_flops(op: CandidateOp, c_in: int, c_out: int, h: int, w: int, stride: int = 1) -> int:
    """Floating-point operations of one forward pass of ``op`` on an h x w map."""
    op = parse_op(op)
    k = op.kernel
    ho, wo = _out(h, stride), _out(w, stride)
    adapt = conv_flops(1, 1, c_in, c_out, 1, ho, wo) if c_in != c_out else 0
    if op in PARAMETER_FREE:
        return adapt
    if op is CandidateOp.ECA_NET_3X3:
        return adapt + conv_flops(1, 3, 1, 1, 1, 1, c_out)
    if op.value.startswith("sep_conv"):
        return (conv_flops(k, k, c_in, c_in, c_in, ho, wo) + conv_flops(1, 1, c_in, c_out, 1, ho, wo)
                + conv_flops(k, k, c_out, c_out, c_out, ho, wo) + conv_flops(1, 1, c_out, c_out, 1, ho, wo))
    if op.value.startswith("dil_conv") or op.value.startswith("lbcnn"):
        return conv_flops(k, k, c_in, c_in, c_in, ho, wo) + conv_flops(1, 1, c_in, c_out, 1, ho, wo)
    if op is CandidateOp.CONV_7X1_1X7:
        return conv_flops(1, 7, c_in, c_out, 1, h, wo) + conv_flops(7, 1, c_out, c_out, 1, ho, wo)
    raise AssertionError(op)


# operation modules ------------------------------------------------------------

def channel_adapt_matrix(c_in: int, c_out: int) -> np.ndarray:
    """Fixed (c_out, c_in) map: averages channels congruent mod c_out, or repeats them."""
    m = np.zeros((c_out, c_in))
    if c_in >= c_out:
        for i in range(c_in):
            m[i % c_out, i] = 1.0
        m /= m.sum(axis=1, keepdims=True)
    else:
        for j in range(c_out):
            m[j, j % c_in] = 1.0
    return m


class ChannelAdapt(Module):
    """Parameter-free channel count change via a frozen 1x1 convolution."""

    def __init__(self, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.kernel = Tensor(channel_adapt_matrix(c_in, c_out)[:, :, None, None])

    def forward(self, x: Tensor) -> Tensor:
        if self.c_in == self.c_out:
            return x
        return ag.conv2d(x, self.kernel)


def subsample(x: Tensor, stride: int) -> Tensor:
    if stride == 1:
        return x
    return x[:, :, ::stride, ::stride]


class Identity(Module):
    def __init__(self, c_in, c_out, stride):
        self.stride = stride
        self.adapt = ChannelAdapt(c_in, c_out)

    def forward(self, x):
        return self.adapt(subsample(x, self.stride))


class Pool(Module):
    def __init__(self, kind, c_in, c_out, stride):
        self.kind, self.stride = kind, stride
        self.adapt = ChannelAdapt(c_in, c_out)

    def forward(self, x):
        fn = ag.max_pool2d if self.kind == "max" else ag.avg_pool2d
        return self.adapt(fn(x, 3, self.stride, 1))


class ECA(Module):
    """Efficient channel attention: GAP, 1-D conv across channels, sigmoid gate."""

    def __init__(self, c_in, c_out, stride, rng, k: int = 3):
        self.stride = stride
        self.weight = Tensor(rng.uniform(-1, 1, (1, 1, 1, k)) / np.sqrt(k), requires_grad=True)
        self.adapt = ChannelAdapt(c_in, c_out)

    def forward(self, x):
        n, c = x.shape[:2]
        y = ag.reshape(ag.global_avg_pool(x), (n, 1, 1, c))
        z = ag.conv2d(y, self.weight, padding=(0, self.weight.shape[3] // 2))
        gate = ag.reshape(ag.sigmoid(z), (n, c, 1, 1))
        return self.adapt(subsample(x * gate, self.stride))


class SepConv(Module):
    def __init__(self, c_in, c_out, k, stride, rng):
        self.dw1 = Conv2d(c_in, c_in, k, rng, stride=stride, groups=c_in)
        self.pw1 = Conv2d(c_in, c_out, 1, rng)
        self.bn1 = BatchNorm2d(c_out)
        self.dw2 = Conv2d(c_out, c_out, k, rng, groups=c_out)
        self.pw2 = Conv2d(c_out, c_out, 1, rng)
        self.bn2 = BatchNorm2d(c_out)

    def forward(self, x):
        x = self.bn1(self.pw1(self.dw1(ag.relu(x))))
        return self.bn2(self.pw2(self.dw2(ag.relu(x))))


class DilConv(Module):
    def __init__(self, c_in, c_out, k, stride, rng, dilation: int = 2):
        self.dw = Conv2d(c_in, c_in, k, rng, stride=stride, dilation=dilation, groups=c_in)
        self.pw = Conv2d(c_in, c_out, 1, rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(self.pw(self.dw(ag.relu(x))))


class LBConv(Module):
    """Local binary convolution: frozen sparse {-1,0,1} depthwise kernel, learned 1x1 mix."""

    def __init__(self, c_in, c_out, k, stride, rng, sparsity: float = 0.5):
        mask = rng.random((c_in, 1, k, k)) < sparsity
        signs = rng.choice([-1.0, 1.0], size=(c_in, 1, k, k))
        self.anchor = Tensor(np.where(mask, signs, 0.0))
        self.stride = stride
        self.pw = Conv2d(c_in, c_out, 1, rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        y = ag.conv2d(x, self.anchor, stride=self.stride, groups=x.shape[1])
        return self.bn(self.pw(ag.relu(y)))


class FactorisedConv7(Module):
    def __init__(self, c_in, c_out, stride, rng):
        self.conv_a = Conv2d(c_in, c_out, (1, 7), rng, stride=(1, stride))
        self.conv_b = Conv2d(c_out, c_out, (7, 1), rng, stride=(stride, 1))
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(self.conv_b(self.conv_a(ag.relu(x))))


def build_op(op: CandidateOp, c_in: int, c_out: int, stride: int, rng: np.random.Generator) -> Module:
    op = parse_op(op)
    k = op.kernel
    if op is CandidateOp.SKIP_CONNECT:
        return Identity(c_in, c_out, stride)
    if op is CandidateOp.MAX_POOL_3X3:
        return Pool("max", c_in, c_out, stride)
    if op is CandidateOp.AVG_POOL_3X3:
        return Pool("avg", c_in, c_out, stride)
    if op is CandidateOp.ECA_NET_3X3:
        return ECA(c_in, c_out, stride, rng)
    if op.value.startswith("sep_conv"):
        return SepConv(c_in, c_out, k, stride, rng)
    if op.value.startswith("dil_conv"):
        return DilConv(c_in, c_out, k, stride, rng)
    if op.value.startswith("lbcnn"):
        return LBConv(c_in, c_out, k, stride, rng)
    return FactorisedConv7(c_in, c_out, stride, rng)


# cells ------------------------------------------------------------------------

@dataclass(frozen=True)
class CellSpec:
    num_nodes: int = DEFAULT_NUM_NODES
    reduction: bool = False

    def __post_init__(self):
        if self.num_nodes < 4:
            raise ValueError(f"a cell needs at least 4 nodes, got {self.num_nodes}")

    @property
    def intermediates(self) -> range:
        return range(2, self.num_nodes - 1)

    @property
    def multiplier(self) -> int:
        return self.num_nodes - 3

    def edges(self) -> list[Edge]:
        return edges_for(self.num_nodes)

    def edge_stride(self, edge: Edge) -> int:
        return 2 if self.reduction and edge[0] < 2 else 1


def edges_for(num_nodes: int) -> list[Edge]:
    return [(i, j) for j in range(2, num_nodes - 1) for i in range(j)]


def mixed_edge_forward(x: Tensor, alpha: Tensor, ops: Sequence) -> Tensor:
    """Softmax(alpha)-weighted sum of the outputs of the active ops."""
    if len(ops) == 0:
        raise ValueError("mixed edge has no active operations")
    if alpha.shape != (len(ops),):
        raise ShapeError(f"alpha has shape {alpha.shape} for {len(ops)} ops")
    return ag.weighted_sum(ag.softmax(alpha), [op(x) for op in ops])


def _check_inputs(s0: Tensor, s1: Tensor, channels: int) -> None:
    if s0.shape[2:] != s1.shape[2:]:
        raise ShapeError(f"cell inputs differ spatially: {s0.shape[2:]} vs {s1.shape[2:]}")
    for name, s in (("prev_prev", s0), ("prev", s1)):
        if s.shape[1] != channels:
            raise ShapeError(f"{name} has {s.shape[1]} channels, cell expects {channels}")


class MixedCell(Module):
    """Supernet cell: every edge carries the softmax mixture of its active ops."""

    def __init__(self, spec: CellSpec, channels: int, ops: Mapping[Edge, Sequence[CandidateOp]],
                 rng: np.random.Generator):
        self.spec = spec
        self.channels = channels
        self.edge_keys = spec.edges()
        self.op_names = {e: tuple(parse_op(o) for o in ops[e]) for e in self.edge_keys}
        self.edge_ops = {
            f"{i}_{j}": [build_op(o, channels, channels, spec.edge_stride((i, j)), rng) for o in self.op_names[(i, j)]]
            for i, j in self.edge_keys
        }

    def forward(self, s0: Tensor, s1: Tensor, alpha: Mapping[Edge, Tensor]) -> Tensor:
        _check_inputs(s0, s1, self.channels)
        states = [s0, s1]
        for j in self.spec.intermediates:
            terms = [mixed_edge_forward(states[i], alpha[(i, j)], self.edge_ops[f"{i}_{j}"]) for i in range(j)]
            states.append(ag.add_n(terms))
        return ag.concat(states[2:], axis=1)


def cell_forward(prev_prev: Tensor, prev: Tensor, spec: CellSpec, alpha: Mapping[Edge, Tensor],
                 weights: MixedCell) -> Tensor:
    if weights.spec != spec:
        raise ValueError(f"cell weights were built for {weights.spec}, not {spec}")
    return weights(prev_prev, prev, alpha)


# architecture parameters --------------------------------------------------------

@dataclass
class ArchParams:
    """Per cell type, per edge: active op tuple and its alpha vector."""

    num_nodes: int
    ops: dict[str, dict[Edge, tuple[CandidateOp, ...]]]
    alpha: dict[str, dict[Edge, Tensor]]

    @classmethod
    def initial(cls, num_nodes: int = DEFAULT_NUM_NODES, rng: np.random.Generator | None = None,
                ops: Sequence[CandidateOp] = ALL_OPS, noise: float = 1e-3) -> "ArchParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        ops = tuple(parse_op(o) for o in ops)
        edges = edges_for(num_nodes)
        op_map, alpha = {}, {}
        for ct in CELL_TYPES:
            op_map[ct] = {e: ops for e in edges}
            alpha[ct] = {e: Tensor(noise * rng.standard_normal(len(ops)), requires_grad=True) for e in edges}
        return cls(num_nodes, op_map, alpha)

    def edges(self) -> list[Edge]:
        return edges_for(self.num_nodes)

    def tensors(self) -> list[Tensor]:
        return [self.alpha[ct][e] for ct in CELL_TYPES for e in self.edges()]

    def active_count(self) -> int:
        counts = {len(v) for ct in CELL_TYPES for v in self.ops[ct].values()}
        if len(counts) != 1:
            raise ValueError(f"edges disagree on active op count: {sorted(counts)}")
        return counts.pop()

    def weights(self, cell_type: str, edge: Edge) -> np.ndarray:
        a = self.alpha[cell_type][edge].data
        z = np.exp(a - a.max())
        return z / z.sum()

    def copy(self) -> "ArchParams":
        return ArchParams(
            self.num_nodes,
            {ct: dict(m) for ct, m in self.ops.items()},
            {ct: {e: Tensor(t.data.copy(), requires_grad=True) for e, t in m.items()} for ct, m in self.alpha.items()},
        )

    def validate(self) -> None:
        for ct in CELL_TYPES:
            for e in self.edges():
                a, o = self.alpha[ct][e], self.ops[ct][e]
                if a.shape != (len(o),):
                    raise ShapeError(f"{ct} edge {e}: alpha length {a.shape} vs {len(o)} ops")
                if not np.all(np.isfinite(a.data)):
                    raise FloatingPointError(f"{ct} edge {e}: non-finite alpha")

    def to_json(self) -> dict:
        return {
            "nodes": self.num_nodes,
            **{ct: [{"edge": list(e), "ops": [o.value for o in self.ops[ct][e]],
                     "alpha": self.alpha[ct][e].data.tolist()} for e in self.edges()] for ct in CELL_TYPES},
        }


def prune_ops(arch: ArchParams, drop_k: int) -> tuple[ArchParams, dict[str, dict[Edge, tuple[CandidateOp, ...]]]]:
    """Drop the ``drop_k`` smallest-alpha ops on every edge; ties drop the lower index."""
    if drop_k < 0:
        raise ValueError(f"drop_k must be >= 0, got {drop_k}")
    new_ops, new_alpha = {}, {}
    for ct in CELL_TYPES:
        new_ops[ct], new_alpha[ct] = {}, {}
        for e in arch.edges():
            a = arch.alpha[ct][e].data
            ops = arch.ops[ct][e]
            if drop_k >= len(ops):
                raise ValueError(f"{ct} edge {e}: cannot drop {drop_k} of {len(ops)} ops")
            order = sorted(range(len(ops)), key=lambda i: (a[i], i))
            keep = sorted(order[drop_k:])
            new_ops[ct][e] = tuple(ops[i] for i in keep)
            new_alpha[ct][e] = Tensor(a[keep].copy(), requires_grad=True)
    pruned = ArchParams(arch.num_nodes, new_ops, new_alpha)
    return pruned, new_ops


# genotypes ---------------------------------------------------------------------

CellGene = tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class Genotype:
    """Discrete cells: for each intermediate node, two (op, source) pairs."""

    normal: CellGene
    reduce: CellGene
    nodes: int = DEFAULT_NUM_NODES

    def __post_init__(self):
        object.__setattr__(self, "normal", _canon(self.normal))
        object.__setattr__(self, "reduce", _canon(self.reduce))
        self.validate()

    def validate(self) -> None:
        n_inter = self.nodes - 3
        for ct in CELL_TYPES:
            gene = getattr(self, ct)
            if len(gene) != 2 * n_inter:
                raise ValueError(f"{ct}: expected {2 * n_inter} (op, src) pairs for {self.nodes} nodes, got {len(gene)}")
            for k in range(n_inter):
                node = k + 2
                (o1, s1), (o2, s2) = gene[2 * k], gene[2 * k + 1]
                for o, s in ((o1, s1), (o2, s2)):
                    parse_op(o)
                    if not 0 <= s < node:
                        raise ValueError(f"{ct}: node {node} takes input from node {s}, which does not precede it")
                if s1 == s2:
                    raise ValueError(f"{ct}: node {node} uses source {s1} twice")

    def ops_used(self) -> set[str]:
        return {o for o, _ in self.normal} | {o for o, _ in self.reduce}

    def to_json(self) -> dict:
        return {"normal": [[o, s] for o, s in self.normal], "reduce": [[o, s] for o, s in self.reduce],
                "nodes": self.nodes}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, obj: Mapping) -> "Genotype":
        try:
            normal, reduce = obj["normal"], obj["reduce"]
        except KeyError as exc:
            raise ValueError(f"genotype JSON lacks {exc.args[0]!r}") from None
        nodes = int(obj.get("nodes", len(normal) // 2 + 3))
        return cls(tuple((str(o), int(s)) for o, s in normal), tuple((str(o), int(s)) for o, s in reduce), nodes)


def _canon(gene) -> CellGene:
    return tuple((parse_op(o).value, int(s)) for o, s in gene)


def derive_genotype(arch: ArchParams) -> Genotype:
    """Top-1 op per edge, then the two strongest incoming edges per node.

    Edge strength is the largest softmax weight on the edge. Ties prefer the
    lower op index and the lower source node id.
    """
    arch.validate()
    genes = {}
    for ct in CELL_TYPES:
        gene = []
        for j in range(2, arch.num_nodes - 1):
            cands = []
            for i in range(j):
                w = arch.weights(ct, (i, j))
                best = int(np.argmax(arch.alpha[ct][(i, j)].data))
                cands.append((-w[best], i, arch.ops[ct][(i, j)][best]))
            cands.sort(key=lambda c: (c[0], c[1]))
            chosen = sorted(cands[:2], key=lambda c: c[1])
            gene.extend((op.value, i) for _, i, op in chosen)
        genes[ct] = tuple(gene)
    return Genotype(genes["normal"], genes["reduce"], arch.num_nodes)


class DiscreteCell(Module):
    """A cell with one op per retained edge, as described by a genotype."""

    def __init__(self, gene: CellGene, num_nodes: int, reduction: bool, channels: int, rng: np.random.Generator):
        self.spec = CellSpec(num_nodes, reduction)
        self.channels = channels
        self.gene = tuple(gene)
        self.ops = [build_op(o, channels, channels, self.spec.edge_stride((s, 2 + k // 2)), rng)
                    for k, (o, s) in enumerate(self.gene)]

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        _check_inputs(s0, s1, self.channels)
        states = [s0, s1]
        for k in range(len(self.gene) // 2):
            (_, a), (_, b) = self.gene[2 * k], self.gene[2 * k + 1]
            states.append(self.ops[2 * k](states[a]) + self.ops[2 * k + 1](states[b]))
        return ag.concat(states[2:], axis=1)
