"""Small ResNet-style classification networks on the float64 tape.

A network is a stem conv, a chain of stages of baseline residual blocks,
an optional template-matching block between the last two stages, global
average pooling and an affine head. Construction is fully deterministic:
every parameter is drawn from its own Philox stream keyed by (seed,
hash of the parameter name), so two networks sharing a seed agree on
every identically-named parameter regardless of what else differs.

Configs have a flat text form (see docs/net-config.md) that round-trips
exactly; checkpoints embed it so a saved network can be rebuilt without
the code that configured it.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import blocks as bl
from .autodiff import BatchNormState, Tensor
from .blocks import ActivationSpec, TemplateBlockConfig


@dataclass
class StageSpec:
    blocks: int
    width_in: int
    width_out: int
    reduction: int = 1

    def __post_init__(self):
        self.blocks = int(self.blocks)
        self.width_in = int(self.width_in)
        self.width_out = int(self.width_out)
        self.reduction = int(self.reduction)
        if self.blocks < 1:
            raise ValueError(f"stage needs at least one block, got {self.blocks}")
        if self.width_in < 1 or self.width_out < 1:
            raise ValueError(f"stage widths must be positive, got {self.width_in}->{self.width_out}")
        if self.reduction not in (1, 2):
            raise ValueError(f"reduction must be 1 or 2, got {self.reduction}")


@dataclass
class NetConfig:
    stages: list
    stem_width: int = 4
    num_classes: int = 10
    input_channels: int = 3
    lam: float = 0.5
    insert_block: TemplateBlockConfig | None = None
    activation: ActivationSpec = field(default_factory=ActivationSpec)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a network needs at least one stage")
        self.stages = tuple(self.stages)
        self.stem_width = int(self.stem_width)
        self.num_classes = int(self.num_classes)
        self.input_channels = int(self.input_channels)
        self.lam = float(self.lam)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.stages[0].width_in != self.stem_width:
            raise ValueError(
                f"stage 1 expects width_in == stem_width, got "
                f"{self.stages[0].width_in} != {self.stem_width}")
        for i in range(1, len(self.stages)):
            expected = self.stages[i - 1].width_out
            if i == len(self.stages) - 1 and self.insert_block is not None:
                if self.insert_block.d_in != expected:
                    raise ValueError(
                        f"template block d_in {self.insert_block.d_in} does not match "
                        f"stage {i} output width {expected}")
                expected = self.insert_block.out_width
            if self.stages[i].width_in != expected:
                raise ValueError(
                    f"stage {i + 1} width_in {self.stages[i].width_in} does not match "
                    f"preceding output width {expected}")
        if self.insert_block is not None and len(self.stages) < 2:
            raise ValueError("the template block sits between the last two stages; "
                             "need at least two stages")


@dataclass
class ForwardResult:
    main_logits: Tensor
    patch_scores: Tensor | None = None
    block: bl.BlockOutput | None = None


def _name_key(name):
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def _init_factory(seed):
    """Per-name deterministic initializer.

    conv/linear weights: uniform Kaiming bound sqrt(6 / fan_in); biases
    and the value table: zero.
    """
    def factory(name, shape, kind):
        if kind in ("bias", "zero"):
            return Tensor(np.zeros(shape), requires_grad=True, name=name)
        if kind == "conv":
            fan_in = shape[1] * (shape[2] * shape[3] if len(shape) == 4 else 1)
        elif kind == "linear":
            fan_in = shape[0]
        else:
            raise ValueError(f"unknown parameter kind {kind!r} for {name}")
        gen = np.random.Generator(np.random.Philox(key=(seed, _name_key(name))))
        bound = math.sqrt(6.0 / fan_in)
        return Tensor(gen.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
    return factory


class Network:
    """Parameters plus forward pass for one NetConfig."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.seed = int(seed)
        self._forward_count = 0
        factory = _init_factory(self.seed)

        self.stem_kernel = factory("stem.conv", (cfg.stem_width, cfg.input_channels, 3, 3),
                                   "conv")
        self.stem_bn = BatchNormState(cfg.stem_width)
        self.stage_blocks = []
        for i, spec in enumerate(cfg.stages):
            stage = []
            for j in range(spec.blocks):
                w_in = spec.width_in if j == 0 else spec.width_out
                stride = spec.reduction if j == 0 else 1
                stage.append(bl.ResidualBlockParams.create(
                    w_in, spec.width_out, stride, cfg.activation, factory,
                    name=f"stage{i + 1}.block{j + 1}"))
            self.stage_blocks.append(stage)
        self.template = None
        if cfg.insert_block is not None:
            self.template = bl.TemplateBlockParams.create(cfg.insert_block, factory,
                                                          name="template")
        width_last = cfg.stages[-1].width_out
        self.head_weight = factory("head.weight", (width_last, cfg.num_classes), "linear")
        self.head_bias = factory("head.bias", (cfg.num_classes,), "bias")

    # ----- parameter access -------------------------------------------------

    def parameters(self):
        out = [("stem.conv", self.stem_kernel),
               ("stem.bn.gamma", self.stem_bn.gamma),
               ("stem.bn.beta", self.stem_bn.beta)]
        for i, stage in enumerate(self.stage_blocks):
            for j, params in enumerate(stage):
                out += params.parameters(name=f"stage{i + 1}.block{j + 1}")
        if self.template is not None:
            out += self.template.parameters(name="template")
        out += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return out

    def bn_states(self):
        out = [("stem.bn", self.stem_bn)]
        for i, stage in enumerate(self.stage_blocks):
            for j, params in enumerate(stage):
                out += params.bn_states(name=f"stage{i + 1}.block{j + 1}")
        if self.template is not None:
            out += self.template.bn_states(name="template")
        return out

    def set_mode(self, mode):
        for _, st in self.bn_states():
            st.mode = mode

    def parameter_count(self):
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()

    def named_state(self):
        """All arrays a checkpoint must carry: parameters + BN running stats."""
        out = [(name, t.data) for name, t in self.parameters()]
        for name, st in self.bn_states():
            if st.initialized:
                out.append((f"{name}.running_mean", st.running_mean))
                out.append((f"{name}.running_var", st.running_var))
        return out

    def load_state(self, named):
        """Overwrite parameters and BN stats from named arrays; strict.

        Accepts a mapping or a (name, array) pair sequence as produced by
        named_state.
        """
        params = dict(self.parameters())
        states = dict(self.bn_states())
        seen = set()
        for name, arr in dict(named).items():
            arr = np.asarray(arr, dtype=np.float64)
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise ValueError(
                        f"checkpoint record {name!r} has shape {arr.shape}, "
                        f"network expects {params[name].data.shape}")
                params[name].data[...] = arr
            elif name.endswith(".running_mean") and name[:-13] in states:
                states[name[:-13]].running_mean = arr.copy()
            elif name.endswith(".running_var") and name[:-12] in states:
                states[name[:-12]].running_var = arr.copy()
            else:
                raise ValueError(f"checkpoint record {name!r} does not exist in this network")
            seen.add(name)
        missing = [n for n in params if n not in seen]
        if missing:
            raise ValueError(f"checkpoint is missing parameter {missing[0]!r}")

    # ----- geometry ---------------------------------------------------------

    def feature_stride(self):
        """Input pixels per feature pixel at the template block's position."""
        stride = 1
        for spec in self.cfg.stages[:-1]:
            stride *= spec.reduction
        return stride

    def block_input_hw(self, input_hw):
        """Feature map size the template block sees for a given image size."""
        h, w = input_hw
        for spec in self.cfg.stages[:-1]:
            if spec.reduction == 2:
                h = math.ceil(h / 2)
                w = math.ceil(w / 2)
        return (h, w)

    # ----- forward ----------------------------------------------------------

    def forward(self, images, train=True):
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.data.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValueError(
                f"expected images [N, {self.cfg.input_channels}, H, W], got {x.shape}")
        self.set_mode("train" if train else "eval")
        if train:
            self._forward_count += 1

        h = ad.relu(ad.batch_norm(ad.conv2d(x, self.stem_kernel), self.stem_bn))
        block_out = None
        last = len(self.cfg.stages) - 1
        block_ordinal = 0
        for i, stage in enumerate(self.stage_blocks):
            if i == last and self.template is not None:
                block_out = bl.template_block_forward(h, self.cfg.insert_block, self.template)
                h = block_out.f_out
            for params in stage:
                block_ordinal += 1
                pseed = (self.seed, (block_ordinal << 32)
                         | (self._forward_count & 0xFFFFFFFF if train else 0))
                h = bl.residual_block_baseline(h, params, self.cfg.activation,
                                               perturbed_seed=pseed)
        pooled = ad.avg_pool(h, (h.shape[2], h.shape[3]), stride=1,
                             border="count_valid", padding="valid")
        feat = ad.reshape(pooled, (h.shape[0], h.shape[1]))
        logits = ad.add(ad.matmul(feat, self.head_weight), self.head_bias)
        return ForwardResult(
            main_logits=logits,
            patch_scores=block_out.patch_scores if block_out is not None else None,
            block=block_out)


def build_network(cfg, seed=0):
    return Network(cfg, seed)


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------

def loss_terms(result, labels, lam):
    """(total, main, aux) loss Tensors; aux is None when lam == 0.

    total is exactly the main term at lam == 0 and exactly the auxiliary
    term at lam == 1, with no arithmetic applied, so those endpoints are
    bit-identical to the standalone losses.
    """
    labels = np.asarray(labels)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    main = ad.cross_entropy(result.main_logits, labels)
    if lam == 0.0:
        return main, main, None
    if result.patch_scores is None:
        raise ValueError("lambda > 0 needs patch scores; this network has no template block")
    n, c, h, w = result.patch_scores.shape
    flat = ad.reshape(ad.transpose(result.patch_scores, (0, 2, 3, 1)), (n * h * w, c))
    aux = ad.cross_entropy(flat, np.repeat(labels, h * w))
    if lam == 1.0:
        return aux, main, aux
    total = ad.add(ad.scalar_mul(main, 1.0 - lam), ad.scalar_mul(aux, lam))
    return total, main, aux


def total_loss(result, labels, lam):
    """Combined objective: (1-lam) * main cross entropy + lam * mean
    per-pixel cross entropy on the template block's patch scores."""
    total, _, _ = loss_terms(result, labels, lam)
    return total


def forward_eval(net, images, labels):
    """Eval-mode forward plus top-1 accuracy (ties resolve to the lowest class)."""
    result = net.forward(images, train=False)
    predicted = np.argmax(result.main_logits.data, axis=1)
    accuracy = float(np.mean(predicted == np.asarray(labels)))
    return result, accuracy


def evaluate(net, images, labels, batch_size=64):
    """Top-1 accuracy over a whole array of images, batched."""
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty set")
    correct = 0
    for start in range(0, n, batch_size):
        batch = images[start:start + batch_size]
        result = net.forward(batch, train=False)
        predicted = np.argmax(result.main_logits.data, axis=1)
        correct += int((predicted == labels[start:start + batch_size]).sum())
    return correct / n


# ---------------------------------------------------------------------
# config text form
# ---------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def net_config_to_text(cfg):
    """Canonical flat text form; parse(net_config_to_text(cfg)) == cfg."""
    lines = ["[net]"]
    for key, v in (("num_classes", cfg.num_classes),
                   ("input_channels", cfg.input_channels),
                   ("stem_width", cfg.stem_width),
                   ("lambda", cfg.lam),
                   ("activation", cfg.activation.kind),
                   ("act_mu", cfg.activation.mu),
                   ("act_eta", cfg.activation.eta),
                   ("act_eps", cfg.activation.eps),
                   ("act_samples", cfg.activation.samples)):
        lines.append(f"{key} = {_fmt(v)}")
    for i, spec in enumerate(cfg.stages):
        lines.append("")
        lines.append(f"[stage{i + 1}]")
        for key, v in (("blocks", spec.blocks), ("width_in", spec.width_in),
                       ("width_out", spec.width_out), ("reduction", spec.reduction)):
            lines.append(f"{key} = {_fmt(v)}")
    if cfg.insert_block is not None:
        b = cfg.insert_block
        window = "auto" if b.patch_window is None else f"{b.patch_window[0]}x{b.patch_window[1]}"
        lines.append("")
        lines.append("[block]")
        for key, v in (("num_classes", b.num_classes), ("d_in", b.d_in),
                       ("d_value", b.d_value), ("patch_window", window),
                       ("shortcut", b.shortcut), ("pre_pool_bn", b.pre_pool_bn),
                       ("shortcut_avgpool2", b.shortcut_avgpool2), ("mixing", b.mixing),
                       ("score_bn", b.score_bn), ("margin_mu", b.margin_mu),
                       ("margin_eta", b.margin_eta), ("margin_eps", b.margin_eps)):
            lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _parse_sections(text):
    sections = []
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = (line[1:-1].strip(), {})
            sections.append(current)
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        if current is None:
            raise ValueError(f"line {ln}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in current[1]:
            raise ValueError(f"line {ln}: duplicate key {key!r} in [{current[0]}]")
        current[1][key] = value
    return sections


def _take(table, section, key, convert):
    if key not in table:
        raise ValueError(f"[{section}] is missing key {key!r}")
    raw = table.pop(key)
    try:
        return convert(raw)
    except ValueError as exc:
        raise ValueError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _bool(raw):
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError("expected true or false")


def net_config_from_text(text):
    return _config_from_sections(_parse_sections(text))


def _config_from_sections(sections):
    names = [name for name, _ in sections]
    if names.count("net") != 1:
        raise ValueError("config needs exactly one [net] section")
    stage_names = [n for n in names if n.startswith("stage")]
    if stage_names != [f"stage{i + 1}" for i in range(len(stage_names))] or not stage_names:
        raise ValueError(f"stages must be [stage1], [stage2], ... in order, got {stage_names}")

    net_tab = dict(sections[names.index("net")][1])
    num_classes = _take(net_tab, "net", "num_classes", int)
    input_channels = _take(net_tab, "net", "input_channels", int)
    stem_width = _take(net_tab, "net", "stem_width", int)
    lam = _take(net_tab, "net", "lambda", float)
    activation = ActivationSpec(
        kind=_take(net_tab, "net", "activation", str),
        mu=_take(net_tab, "net", "act_mu", float),
        eta=_take(net_tab, "net", "act_eta", float),
        eps=_take(net_tab, "net", "act_eps", float),
        samples=_take(net_tab, "net", "act_samples", int))
    if net_tab:
        raise ValueError(f"[net] has unknown key {next(iter(net_tab))!r}")

    stages = []
    block_cfg = None
    for name, tab in sections:
        tab = dict(tab)
        if name == "net":
            continue
        if name.startswith("stage"):
            stages.append(StageSpec(
                blocks=_take(tab, name, "blocks", int),
                width_in=_take(tab, name, "width_in", int),
                width_out=_take(tab, name, "width_out", int),
                reduction=_take(tab, name, "reduction", int)))
        elif name == "block":
            window_raw = _take(tab, name, "patch_window", str)
            if window_raw == "auto":
                window = None
            else:
                parts = window_raw.split("x")
                if len(parts) != 2:
                    raise ValueError(f"[block] patch_window must be 'auto' or 'HxW', "
                                     f"got {window_raw!r}")
                window = (int(parts[0]), int(parts[1]))
            block_cfg = TemplateBlockConfig(
                num_classes=_take(tab, name, "num_classes", int),
                d_in=_take(tab, name, "d_in", int),
                d_value=_take(tab, name, "d_value", int),
                patch_window=window,
                shortcut=_take(tab, name, "shortcut", str),
                pre_pool_bn=_take(tab, name, "pre_pool_bn", _bool),
                shortcut_avgpool2=_take(tab, name, "shortcut_avgpool2", _bool),
                mixing=_take(tab, name, "mixing", str),
                score_bn=_take(tab, name, "score_bn", _bool),
                margin_mu=_take(tab, name, "margin_mu", float),
                margin_eta=_take(tab, name, "margin_eta", float),
                margin_eps=_take(tab, name, "margin_eps", float))
        else:
            raise ValueError(f"unknown section [{name}]")
        if tab:
            raise ValueError(f"[{name}] has unknown key {next(iter(tab))!r}")

    return NetConfig(stages=stages, stem_width=stem_width, num_classes=num_classes,
                     input_channels=input_channels, lam=lam, insert_block=block_cfg,
                     activation=activation)


def perturbed_memory_bytes(cfg, batch_size, input_hw, samples=None):
    """Retained-sample memory a perturbed-activation forward+backward needs.

    Every residual block's layer keeps its noise draws alive until the
    backward pass, so the estimate sums S*N*K*H*W float64 over all blocks,
    with a 1.5x allowance for the winner masks held alongside.
    """
    samples = cfg.activation.samples if samples is None else int(samples)
    h, w = input_hw
    total = 0
    for spec in cfg.stages:
        if spec.reduction == 2:
            h = math.ceil(h / 2)
            w = math.ceil(w / 2)
        total += spec.blocks * samples * batch_size * spec.width_out * h * w * 8
    return int(total * 1.5)


# ---------------------------------------------------------------------
# stock configurations
# ---------------------------------------------------------------------

def desk_config(num_classes=10, input_channels=3, template=True, lam=0.5,
                blocks_per_stage=2, mixing="bn_relu", shortcut="add",
                activation=None):
    """Desk-scale default: stem 4, widths 16/32/32/64, reductions 1/2/2/1.

    With ``template`` the matching block (d_in 32, d_value 32) sits between
    the last two stages; without it the stage chain is unchanged, so the
    baseline differs only by the missing block.
    """
    block = None
    last_in = 32
    if template:
        block = TemplateBlockConfig(num_classes=num_classes, d_in=32, d_value=32,
                                    shortcut=shortcut, mixing=mixing)
        last_in = block.out_width
    stages = [StageSpec(blocks_per_stage, 4, 16, 1),
              StageSpec(blocks_per_stage, 16, 32, 2),
              StageSpec(blocks_per_stage, 32, 32, 2),
              StageSpec(blocks_per_stage, last_in, 64, 1)]
    return NetConfig(stages=stages, stem_width=4, num_classes=num_classes,
                     input_channels=input_channels, lam=lam if template else 0.0,
                     insert_block=block,
                     activation=activation or ActivationSpec())
