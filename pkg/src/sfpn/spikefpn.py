"""Spiking feature pyramid detector: stems, three-node spiking cells, pyramid, heads.

All layers run in multi-step mode: activations carry a leading time axis
``(T, N, C, H, W)``; convolutions and batch norm see the ``T*N`` flattened
batch while each neuron layer steps its membrane state through ``T``.  Only the
final time step reaches the 1x1 prediction convolutions.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import autograd_ops as ops
from .errors import CheckpointError, ConfigError, ShapeError
from .serde import canonical_json, from_dict, to_dict
from .spiking import ALIFNeuron, LIFNeuron, NeuronConfig, make_neuron

CHECKPOINT_MAGIC = b"SFPN"
CHECKPOINT_VERSION = 1

DEFAULT_STAGE_PLAN = ((2, False), (3, True), (3, True), (2, True))


@dataclass
class NetworkSpec:
    initial_channels: int = 48
    num_classes: int = 2
    num_anchors: int = 3
    input_hw: tuple[int, int] = (256, 256)
    time_steps: int = 3
    frames_per_stack: int = 3
    first_layer_neuron: str = "alif"
    body_neuron: str = "lif"
    stage_plan: tuple[tuple[int, bool], ...] = DEFAULT_STAGE_PLAN
    pyramid_taps: tuple[int, int, int] = (4, 7, 9)
    node_divisor: int = 3
    cell_fusion: str = "concat"
    conf_bias_init: float = -2.0
    # batch norm scale at init; well below 1 so the deep spiking stack starts in a trainable regime
    bn_gamma_init: float = 0.3
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def validate(self):
        if self.initial_channels <= 0 or self.initial_channels % self.node_divisor:
            raise ConfigError(
                f"initial_channels={self.initial_channels} must be divisible by node_divisor={self.node_divisor}"
            )
        n_down = 2 + sum(1 for _, down in self.stage_plan if down)
        factor = 2 ** n_down
        H, W = self.input_hw
        if H % factor or W % factor:
            raise ConfigError(f"input size {H}x{W} must be divisible by {factor}")
        if self.first_layer_neuron not in ("lif", "alif", "binary"):
            raise ConfigError(f"unknown first_layer_neuron {self.first_layer_neuron!r}")
        if self.body_neuron not in ("lif", "alif", "binary"):
            raise ConfigError(f"unknown body_neuron {self.body_neuron!r}")
        if self.cell_fusion not in ("concat", "sum"):
            raise ConfigError(f"cell_fusion must be 'concat' or 'sum', got {self.cell_fusion!r}")
        n_cells = sum(n for n, _ in self.stage_plan)
        if sorted(self.pyramid_taps) != list(self.pyramid_taps) or self.pyramid_taps[-1] >= n_cells:
            raise ConfigError(f"pyramid taps {self.pyramid_taps} invalid for {n_cells} cells")
        if min(self.num_classes, self.num_anchors, self.time_steps, self.frames_per_stack) < 1:
            raise ConfigError("classes, anchors, time steps and frames must be >= 1")
        if not self.bn_gamma_init > 0:
            raise ConfigError(f"bn_gamma_init must be positive, got {self.bn_gamma_init}")
        self.neuron.validate()
        return self

    @property
    def pred_channels(self) -> int:
        return self.num_anchors * (self.num_classes + 5)


def full_spec(**overrides) -> NetworkSpec:
    """Full-size configuration (48 initial channels, 256x256 input)."""
    return NetworkSpec(**overrides)


def desk_spec(**overrides) -> NetworkSpec:
    """Reduced configuration that trains on a single CPU core."""
    kw = dict(initial_channels=8, input_hw=(64, 64), node_divisor=2, first_layer_neuron="lif")
    kw.update(overrides)
    return NetworkSpec(**kw)


# -- layers --------------------------------------------------------------------


def _merge(x):
    return x.reshape(x.shape[0] * x.shape[1], *x.shape[2:])


def _split(x, t):
    return x.reshape(t, x.shape[0] // t, *x.shape[1:])


class Recorder:
    """Collects per-step firing rates and synaptic input densities of one forward pass."""

    def __init__(self):
        self.neurons: dict[str, list[float]] = {}
        self.neuron_sizes: dict[str, int] = {}
        self.synapses: dict[str, list[float]] = {}

    def neuron(self, name, spikes):
        dims = tuple(range(1, spikes.dim()))
        self.neurons[name] = spikes.detach().float().mean(dim=dims).tolist()
        self.neuron_sizes[name] = int(np.prod(spikes.shape[2:]))

    def synapse(self, name, conv: "ConvBN", x):
        # fraction of the conv's (output position, tap, input channel) accumulations
        # whose input is non-zero; equals accumulations performed / dense count
        with torch.no_grad():
            t = x.shape[0]
            mask = (_merge(x) != 0).to(torch.float32).sum(dim=1, keepdim=True)
            k = conv.kernel
            taps = torch.nn.functional.conv2d(
                mask, torch.ones(1, 1, k, k), stride=conv.stride, padding=conv.padding
            )
            per_step = _split(taps, t).sum(dim=tuple(range(1, 5)))
            dense = x.shape[1] * conv.out_hw[0] * conv.out_hw[1] * conv.in_channels * k * k
            self.synapses[name] = (per_step / dense).tolist()

    def as_dict(self):
        return {
            "neurons": self.neurons,
            "neuron_sizes": self.neuron_sizes,
            "synapses": self.synapses,
        }


class ConvBN(nn.Module):
    """Convolution followed by batch norm, producing a membrane input current."""

    def __init__(self, name, cin, cout, kernel, stride, in_hw):
        super().__init__()
        self.name = name
        self.in_channels, self.out_channels = cin, cout
        self.kernel, self.stride = kernel, stride
        self.padding = kernel // 2
        self.in_hw = tuple(in_hw)
        self.out_hw = tuple(ops.conv_output_size(s, kernel, stride, self.padding) for s in in_hw)
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bn_weight = nn.Parameter(torch.ones(cout))
        self.bn_bias = nn.Parameter(torch.zeros(cout))
        self.register_buffer("running_mean", torch.zeros(cout))
        self.register_buffer("running_var", torch.ones(cout))
        self.register_buffer("num_batches_tracked", torch.zeros((), dtype=torch.long))
        self.folded_bias: torch.Tensor | None = None
        self.recorder: Recorder | None = None

    def bn_state(self) -> ops.BNState:
        state = ops.BNState(self.bn_weight, self.bn_bias, self.running_mean, self.running_var)
        state.num_batches_tracked = int(self.num_batches_tracked)
        return state

    def forward(self, x):
        if self.recorder is not None:
            self.recorder.synapse(self.name, self, x)
        t = x.shape[0]
        if self.folded_bias is not None:
            y = ops.conv2d(_merge(x), self.weight, self.stride, self.padding, bias=self.folded_bias)
            return _split(y, t)
        y = ops.conv2d(_merge(x), self.weight, self.stride, self.padding)
        state = self.bn_state()
        y = ops.batch_norm(y, state, self.training)
        if self.training:
            self.num_batches_tracked += 1
        return _split(y, t)


class SpikingBlock(nn.Module):
    """Membrane sum of one or more ConvBN branches, then a spiking neuron."""

    def __init__(self, name, branches, neuron):
        super().__init__()
        self.name = name
        self.branches = nn.ModuleList(branches)
        self.neuron = neuron
        self.recorder: Recorder | None = None

    @property
    def out_channels(self):
        return self.branches[0].out_channels

    @property
    def out_hw(self):
        return self.branches[0].out_hw

    def forward(self, *inputs):
        if len(inputs) != len(self.branches):
            raise ShapeError(f"{self.name}: expected {len(self.branches)} inputs, got {len(inputs)}")
        current = self.branches[0](inputs[0])
        for branch, x in zip(self.branches[1:], inputs[1:]):
            current = current + branch(x)
        spikes = self.neuron(current)
        if self.recorder is not None:
            self.recorder.neuron(self.name, spikes)
        return spikes


def _stride_between(in_hw, out_hw, where):
    ratio = in_hw[0] // out_hw[0]
    if ratio not in (1, 2) or in_hw[0] != ratio * out_hw[0] or in_hw[1] != ratio * out_hw[1]:
        raise ShapeError(f"{where}: cannot align {in_hw} to {out_hw}")
    return ratio


class Cell(nn.Module):
    """Three spiking nodes over the outputs of the previous two cells.

    Nodes 0 and 1 each integrate both cell inputs (3x3 edges, stride 2 when
    the input is at twice the cell resolution); node 2 integrates nodes 0 and 1.
    The node spikes are fused (concatenated, or summed) and re-spiked by a 1x1
    block to the cell width.
    """

    def __init__(self, index, s0, s1, channels, out_hw, node_channels, fusion, neuron_fn):
        super().__init__()
        self.index, self.fusion = index, fusion
        self.out_channels, self.out_hw = channels, tuple(out_hw)
        name = f"cell{index}"
        m = node_channels
        nodes = []
        for j in (0, 1):
            edges = [
                ConvBN(f"{name}.node{j}.edge{k}", c_in, m, 3, _stride_between(hw, out_hw, name), hw)
                for k, (c_in, hw) in enumerate((s0, s1))
            ]
            nodes.append(SpikingBlock(f"{name}.node{j}", edges, neuron_fn()))
        edges = [ConvBN(f"{name}.node2.edge{k}", m, m, 3, 1, out_hw) for k in (0, 1)]
        nodes.append(SpikingBlock(f"{name}.node2", edges, neuron_fn()))
        self.nodes = nn.ModuleList(nodes)
        fused = 3 * m if fusion == "concat" else m
        self.fuse = SpikingBlock(f"{name}.fuse", [ConvBN(f"{name}.fuse", fused, channels, 1, 1, out_hw)], neuron_fn())

    def forward(self, s0, s1):
        n0 = self.nodes[0](s0, s1)
        n1 = self.nodes[1](s0, s1)
        n2 = self.nodes[2](n0, n1)
        if self.fusion == "concat":
            merged = torch.cat([n0, n1, n2], dim=2)
        else:
            merged = n0 + n1 + n2
        return self.fuse(merged)


class Pyramid(nn.Module):
    """Top-down fusion of three backbone taps into spiking maps p1 (fine) .. p3 (coarse)."""

    def __init__(self, taps, neuron_fn):
        super().__init__()
        (c4, hw4), (c7, hw7), (c9, hw9) = taps
        p3c, p2c, p1c = c9 // 2, c7 // 2, c4 // 2
        self.p3 = SpikingBlock("fpn.p3", [ConvBN("fpn.p3", c9, p3c, 1, 1, hw9)], neuron_fn())
        self.p2 = SpikingBlock("fpn.p2", [ConvBN("fpn.p2", p3c + c7, p2c, 1, 1, hw7)], neuron_fn())
        self.p1 = SpikingBlock("fpn.p1", [ConvBN("fpn.p1", p2c + c4, p1c, 1, 1, hw4)], neuron_fn())
        self.channels = (p1c, p2c, p3c)
        self.hws = (tuple(hw4), tuple(hw7), tuple(hw9))

    def forward(self, cell9, cell7, cell4):
        p3 = self.p3(cell9)
        p2 = self.p2(_cat_up(p3, cell7))
        p1 = self.p1(_cat_up(p2, cell4))
        return p1, p2, p3


def _cat_up(coarse, fine):
    t = coarse.shape[0]
    up = ops.upsample_nearest_x2(_merge(coarse))
    return _split(ops.concat_channels(up, _merge(fine)), t)


def pyramid_fuse(pyramid: Pyramid, cell9, cell7, cell4):
    """Return ``(p1, p2, p3)`` from the outputs of cells 9, 7 and 4."""
    return pyramid(cell9, cell7, cell4)


class Head(nn.Module):
    def __init__(self, index, channels, hw, pred_channels, neuron_fn):
        super().__init__()
        self.block = SpikingBlock(f"head{index}", [ConvBN(f"head{index}", channels, channels, 3, 1, hw)], neuron_fn())
        self.pred = nn.Conv2d(channels, pred_channels, 1, bias=True)
        self.hw = tuple(hw)
        self.name = f"head{index}.pred"

    def forward(self, p):
        spikes = self.block(p)
        return ops.conv2d(spikes[-1], self.pred.weight, 1, 0, bias=self.pred.bias)


class NetworkGraph(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        nc = spec.neuron
        body = lambda: make_neuron(spec.body_neuron, nc)  # noqa: E731
        H, W = spec.input_hw
        c0 = spec.initial_channels
        self.stem0 = SpikingBlock(
            "stem0", [ConvBN("stem0", spec.frames_per_stack, c0, 3, 2, (H, W))],
            make_neuron(spec.first_layer_neuron, nc),
        )
        self.stem1 = SpikingBlock("stem1", [ConvBN("stem1", c0, 2 * c0, 3, 2, self.stem0.out_hw)], body())

        outs = [(c0, self.stem0.out_hw), (2 * c0, self.stem1.out_hw)]
        cells = []
        channels, hw = 2 * c0, self.stem1.out_hw
        for stage, (count, down) in enumerate(spec.stage_plan):
            for j in range(count):
                if stage > 0 and j == 0:
                    channels *= 2
                    if down:
                        hw = (hw[0] // 2, hw[1] // 2)
                m = channels // spec.node_divisor
                cell = Cell(len(cells), outs[-2], outs[-1], channels, hw, m, spec.cell_fusion, body)
                cells.append(cell)
                outs.append((channels, hw))
        self.cells = nn.ModuleList(cells)
        a, b, c = spec.pyramid_taps
        self.pyramid = Pyramid([outs[2 + a], outs[2 + b], outs[2 + c]], body)
        self.heads = nn.ModuleList(
            Head(d + 1, ch, hw_, spec.pred_channels, body)
            for d, (ch, hw_) in enumerate(zip(self.pyramid.channels, self.pyramid.hws))
        )
        self._recorder: Recorder | None = None

    # -- bookkeeping ------------------------------------------------------------

    def conv_layers(self):
        return [m for m in self.modules() if isinstance(m, ConvBN)]

    def spiking_blocks(self):
        return [m for m in self.modules() if isinstance(m, SpikingBlock)]

    def neurons(self):
        return [m for m in self.modules() if isinstance(m, (LIFNeuron, ALIFNeuron))]

    def set_soft(self, soft: bool):
        for n in self.neurons():
            n.soft = soft

    def param_boxes(self):
        """Box constraints keyed by parameter object (projected after optimizer steps)."""
        boxes = {}
        for n in self.neurons():
            if isinstance(n, ALIFNeuron):
                for pname, box in n.param_boxes().items():
                    p = getattr(n, pname)
                    if isinstance(p, nn.Parameter):
                        boxes[p] = box
        return boxes

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """Output ``(c, h, w)`` of every named stage in the order of the architecture table."""
        shapes = {"stem0": (self.stem0.out_channels, *self.stem0.out_hw),
                  "stem1": (self.stem1.out_channels, *self.stem1.out_hw)}
        for i, cell in enumerate(self.cells):
            shapes[f"cell{i}"] = (cell.out_channels, *cell.out_hw)
        for name, ch, hw in zip(("p1", "p2", "p3"), self.pyramid.channels, self.pyramid.hws):
            shapes[name] = (ch, *hw)
        for d, head in enumerate(self.heads):
            shapes[f"d{d + 1}"] = (self.spec.pred_channels, *head.hw)
        return shapes

    # -- execution ------------------------------------------------------------

    def _prepare(self, stack):
        if hasattr(stack, "data") and isinstance(getattr(stack, "data"), np.ndarray):
            stack = stack.data
        x = torch.as_tensor(np.asarray(stack) if not torch.is_tensor(stack) else stack)
        if x.dim() == 4:
            x = x.unsqueeze(0)
        spec = self.spec
        want = (spec.time_steps, spec.frames_per_stack, *spec.input_hw)
        if x.dim() != 5 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"expected input (N, {', '.join(map(str, want))}), got {tuple(x.shape)}")
        dtype = self.stem0.branches[0].weight.dtype
        return x.to(dtype).transpose(0, 1).contiguous()

    def forward(self, stack, record: bool = False):
        """Run all time steps; returns ``(head outputs, firing record or None)``.

        Head outputs are ``(N, K, C+5, h, w)`` tensors for strides 8, 16, 32
        computed from the last time step only.
        """
        recorder = Recorder() if record else None
        self._attach(recorder)
        try:
            x = self._prepare(stack)
            s0 = self.stem0(x)
            s1 = self.stem1(s0)
            outs = [s0, s1]
            for cell in self.cells:
                outs.append(cell(outs[-2], outs[-1]))
            a, b, c = self.spec.pyramid_taps
            p1, p2, p3 = self.pyramid(outs[2 + c], outs[2 + b], outs[2 + a])
            heads = []
            for head, p in zip(self.heads, (p1, p2, p3)):
                raw = head(p)
                if recorder is not None:
                    recorder.synapses[head.name] = [float((p[-1] != 0).float().mean())]
                n, _, h, w = raw.shape
                heads.append(raw.reshape(n, self.spec.num_anchors, self.spec.num_classes + 5, h, w))
        finally:
            self._attach(None)
        return heads, (recorder.as_dict() if recorder is not None else None)

    def _attach(self, recorder):
        for m in self.modules():
            if isinstance(m, (ConvBN, SpikingBlock)):
                m.recorder = recorder


def build_network(spec: NetworkSpec, seed: int = 0) -> NetworkGraph:
    """Instantiate the graph with deterministic fan-in scaled initialization."""
    graph = NetworkGraph(spec)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for conv in graph.conv_layers():
            fan_in = conv.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
            conv.bn_weight.fill_(spec.bn_gamma_init)
        for head in graph.heads:
            fan_in = head.pred.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            head.pred.weight.copy_(torch.rand(head.pred.weight.shape, generator=gen) * 2 * bound - bound)
            bias = torch.zeros(spec.num_anchors, spec.num_classes + 5)
            bias[:, 4] = spec.conf_bias_init
            head.pred.bias.copy_(bias.reshape(-1))
    return graph


def forward(graph: NetworkGraph, stack, mode: str = "eval", record: bool = True):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    graph.train(mode == "train")
    return graph(stack, record=record)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def fold_batchnorm(graph: NetworkGraph) -> NetworkGraph:
    """Copy of ``graph`` with every batch norm folded into its convolution (eval only)."""
    folded = copy.deepcopy(graph).eval()
    with torch.no_grad():
        for conv in folded.conv_layers():
            w, b = ops.fold_bn_into_conv(conv.weight, conv.bn_state())
            conv.weight.copy_(w)
            conv.folded_bias = b.detach().clone()
    return folded


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, graph: NetworkGraph, meta: dict | None = None,
                    extra_tensors: dict[str, torch.Tensor] | None = None) -> None:
    """Write ``SFPN`` | version u8 | u32 json length | canonical JSON | u32 count | tensors.

    Each tensor: u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian f32 data.
    """
    header = json.dumps(
        {"network_spec": to_dict(graph.spec), "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    tensors = dict(graph.state_dict())
    tensors.update(extra_tensors or {})
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(header)), header,
              struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().to(torch.float32).numpy().astype("<f4")
        raw_name = name.encode()
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path):
    """Return ``(network_spec dict, meta dict, {name: float32 tensor})``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, not a checkpoint")
    try:
        version, hlen = struct.unpack_from("<BI", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 9
        header = json.loads(raw[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            tensors[name] = torch.from_numpy(data.copy())
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return header["network_spec"], header.get("meta", {}), tensors


def load_checkpoint(path, expect_spec: NetworkSpec | None = None):
    """Rebuild the graph stored at ``path``; returns ``(graph, meta, extra tensors)``."""
    spec_dict, meta, tensors = read_checkpoint(path)
    spec = from_dict(NetworkSpec, spec_dict)
    if expect_spec is not None and canonical_json(expect_spec) != canonical_json(spec):
        raise CheckpointError(f"{path}: checkpoint network spec does not match the configured one")
    graph = NetworkGraph(spec)
    state = graph.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing[:5]}")
    graph.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})
    extra = {k: v for k, v in tensors.items() if k not in state}
    return graph, meta, extra
