"""Two-branch gated CNN+LSTM regressor and its ablation variants.

Each modality runs through six 3x3 convolutions (stride 1, padding 1, batch
norm + ReLU after each) interleaved with average pools of 4, 2, 2, then is
flattened. A gate unit maps both feature vectors to a single reliability
value alpha in (0, 1); the image features are scaled by alpha and the
tactile features by beta = 1 - alpha before being concatenated into an LSTM
whose hidden state feeds a 3-way linear head (dx, dy, dtheta).

Variants: ``dgml`` (the gated model), ``no-gate`` (plain concatenation,
fixed alpha = beta = 1), ``image-only`` and ``tactile-only`` (one branch,
no gate, LSTM input sized to that branch).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ShapeError, Tensor

__all__ = [
    "ModelProfile",
    "PROFILES",
    "POOL_SIZES",
    "ConvBlock",
    "BranchParams",
    "GateParams",
    "RecurrentParams",
    "ModelParams",
    "GateTrace",
    "SequenceRun",
    "VARIANTS",
    "make_variant",
    "extract_features",
    "gate_forward",
    "scale_features",
    "lstm_step",
    "pose_head",
    "init_state",
    "step_forward",
    "run_sequence",
    "forward_sequence",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

POOL_SIZES = (4, 2, 2)
_POOL_AFTER = {1: 4, 3: 2, 5: 2}  # pool size applied after conv block index
_CONV_LAYERS = 6

VARIANTS = ("dgml", "no-gate", "image-only", "tactile-only")


@dataclass(frozen=True)
class ModelProfile:
    """Input geometry and layer widths for one scale of the architecture."""

    name: str
    image_hw: tuple[int, int]
    tactile_hw: tuple[int, int]
    conv_channels: int
    lstm_hidden: int

    def __post_init__(self):
        for label, (h, w) in (("image", self.image_hw), ("tactile", self.tactile_hw)):
            if h // 16 < 1 or w // 16 < 1:
                raise ValueError(f"{label} input {h}x{w} collapses below 1x1 after 4,2,2 pooling")

    def feature_dim(self, kind: str) -> int:
        h, w = self.image_hw if kind == "image" else self.tactile_hw
        return self.conv_channels * (h // 16) * (w // 16)

    def lstm_input_dim(self, variant: str) -> int:
        if variant in ("dgml", "no-gate"):
            return self.feature_dim("image") + self.feature_dim("tactile")
        if variant == "image-only":
            return self.feature_dim("image")
        if variant == "tactile-only":
            return self.feature_dim("tactile")
        raise ValueError(f"unknown variant {variant!r}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "image_hw": list(self.image_hw),
                "tactile_hw": list(self.tactile_hw),
                "conv_channels": self.conv_channels,
                "lstm_hidden": self.lstm_hidden,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelProfile":
        d = json.loads(text)
        return cls(
            name=d["name"],
            image_hw=tuple(d["image_hw"]),
            tactile_hw=tuple(d["tactile_hw"]),
            conv_channels=int(d["conv_channels"]),
            lstm_hidden=int(d["lstm_hidden"]),
        )


PROFILES = {
    "full": ModelProfile("full", image_hw=(80, 120), tactile_hw=(160, 120), conv_channels=32, lstm_hidden=170),
    "desk": ModelProfile("desk", image_hw=(20, 30), tactile_hw=(40, 30), conv_channels=8, lstm_hidden=32),
}


@dataclass
class ConvBlock:
    kernel: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    bn: BatchNormState


@dataclass
class BranchParams:
    kind: str  # "image" | "tactile"
    input_hw: tuple[int, int]
    blocks: list[ConvBlock]


@dataclass
class GateParams:
    w_img: Tensor
    b_img: Tensor
    w_tac: Tensor
    b_tac: Tensor
    w_comb: Tensor
    b_comb: Tensor


@dataclass
class RecurrentParams:
    w_x: Tensor  # [4H, D]
    w_h: Tensor  # [4H, H]
    b: Tensor  # [4H], gate order: input, forget, candidate, output
    w_out: Tensor  # [3, H]
    b_out: Tensor  # [3]
    input_size: int
    hidden_size: int


@dataclass
class ModelParams:
    variant: str
    profile: ModelProfile
    image_branch: BranchParams | None
    tactile_branch: BranchParams | None
    gate: GateParams | None
    recurrent: RecurrentParams

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch in (self.image_branch, self.tactile_branch):
            if branch is None:
                continue
            for i, blk in enumerate(branch.blocks):
                prefix = f"{branch.kind}.block{i}"
                out[f"{prefix}.kernel"] = blk.kernel
                out[f"{prefix}.bias"] = blk.bias
                out[f"{prefix}.gamma"] = blk.gamma
                out[f"{prefix}.beta"] = blk.beta
        if self.gate is not None:
            for name in ("w_img", "b_img", "w_tac", "b_tac", "w_comb", "b_comb"):
                out[f"gate.{name}"] = getattr(self.gate, name)
        out["lstm.w_x"] = self.recurrent.w_x
        out["lstm.w_h"] = self.recurrent.w_h
        out["lstm.b"] = self.recurrent.b
        out["head.weight"] = self.recurrent.w_out
        out["head.bias"] = self.recurrent.b_out
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for branch in (self.image_branch, self.tactile_branch):
            if branch is None:
                continue
            for i, blk in enumerate(branch.blocks):
                out[f"{branch.kind}.block{i}.bn_mean"] = blk.bn.running_mean
                out[f"{branch.kind}.block{i}.bn_var"] = blk.bn.running_var
        return out


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _make_branch(kind: str, profile: ModelProfile, rng: np.random.Generator) -> BranchParams:
    ch = profile.conv_channels
    blocks = []
    c_in = 1
    for _ in range(_CONV_LAYERS):
        kernel = Tensor(_he_uniform(rng, (ch, c_in, 3, 3), fan_in=c_in * 9), requires_grad=True)
        blocks.append(
            ConvBlock(
                kernel=kernel,
                bias=Tensor(np.zeros(ch), requires_grad=True),
                gamma=Tensor(np.ones(ch), requires_grad=True),
                beta=Tensor(np.zeros(ch), requires_grad=True),
                bn=BatchNormState.fresh(ch),
            )
        )
        c_in = ch
    hw = profile.image_hw if kind == "image" else profile.tactile_hw
    return BranchParams(kind=kind, input_hw=hw, blocks=blocks)


def _make_gate(profile: ModelProfile, rng: np.random.Generator) -> GateParams:
    f_img = profile.feature_dim("image")
    f_tac = profile.feature_dim("tactile")
    return GateParams(
        w_img=Tensor(_xavier_uniform(rng, (1, f_img), f_img, 1), requires_grad=True),
        b_img=Tensor(np.zeros(1), requires_grad=True),
        w_tac=Tensor(_xavier_uniform(rng, (1, f_tac), f_tac, 1), requires_grad=True),
        b_tac=Tensor(np.zeros(1), requires_grad=True),
        w_comb=Tensor(_xavier_uniform(rng, (1, 2), 2, 1), requires_grad=True),
        b_comb=Tensor(np.zeros(1), requires_grad=True),
    )


def _make_recurrent(profile: ModelProfile, input_size: int, rng: np.random.Generator) -> RecurrentParams:
    h = profile.lstm_hidden
    w_x = np.vstack([_xavier_uniform(rng, (h, input_size), input_size, h) for _ in range(4)])
    w_h = np.vstack([_xavier_uniform(rng, (h, h), h, h) for _ in range(4)])
    return RecurrentParams(
        w_x=Tensor(w_x, requires_grad=True),
        w_h=Tensor(w_h, requires_grad=True),
        b=Tensor(np.zeros(4 * h), requires_grad=True),
        w_out=Tensor(_xavier_uniform(rng, (3, h), h, 3), requires_grad=True),
        b_out=Tensor(np.zeros(3), requires_grad=True),
        input_size=input_size,
        hidden_size=h,
    )


def make_variant(kind: str, profile: ModelProfile | None = None, seed: int = 0) -> ModelParams:
    """Seeded parameter set for one model variant.

    Convolutions use He-uniform init (they feed ReLU); everything else is
    Xavier-uniform; biases start at zero.
    """
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    profile = profile or PROFILES["desk"]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD6]))
    image_branch = _make_branch("image", profile, rng) if kind != "tactile-only" else None
    tactile_branch = _make_branch("tactile", profile, rng) if kind != "image-only" else None
    gate = _make_gate(profile, rng) if kind == "dgml" else None
    recurrent = _make_recurrent(profile, profile.lstm_input_dim(kind), rng)
    return ModelParams(
        variant=kind,
        profile=profile,
        image_branch=image_branch,
        tactile_branch=tactile_branch,
        gate=gate,
        recurrent=recurrent,
    )


# ---------------------------------------------------------------------------
# forward pieces


def extract_features(frame: Tensor, branch: BranchParams, mode: str) -> Tensor:
    """conv->BN->ReLU pairs with 4,2,2 pooling, flattened to a feature vector.

    Accepts one frame [1,H,W] or a batch [N,1,H,W]; the conv stack runs in
    the channel-major [C,N,h,w] layout and the result is [F] / [N,F].
    """
    h, w = branch.input_hw
    batched = frame.ndim == 4
    if batched:
        if frame.shape[1:] != (1, h, w):
            raise ShapeError(f"{branch.kind} branch expects [N,1,{h},{w}] frames, got {frame.shape}")
        x = ad.transpose(frame, (1, 0, 2, 3))  # free: the channel axis has size 1
    else:
        if frame.shape != (1, h, w):
            raise ShapeError(f"{branch.kind} branch expects [1,{h},{w}] frames, got {frame.shape}")
        x = frame
    for i, blk in enumerate(branch.blocks):
        x = ad.conv2d(x, blk.kernel, blk.bias, stride=(1, 1), padding=(1, 1))
        x = ad.batchnorm(x, blk.gamma, blk.beta, blk.bn, mode)
        x = ad.relu(x)
        pool = _POOL_AFTER.get(i)
        if pool:
            x = ad.avgpool2d(x, (pool, pool))
    if batched:
        c, n, hh, ww = x.shape
        return ad.reshape(ad.transpose(x, (1, 0, 2, 3)), (n, c * hh * ww))
    return ad.reshape(x, (x.shape[0] * x.shape[1] * x.shape[2],))


def gate_forward(x_img: Tensor, x_tac: Tensor, gate: GateParams) -> tuple[Tensor, Tensor]:
    """Reliability pair (alpha, beta): sigmoid of an affine combination of the
    two per-modality gate projections, with beta = 1 - alpha by construction."""
    g_img = ad.linear(x_img, gate.w_img, gate.b_img)
    g_tac = ad.linear(x_tac, gate.w_tac, gate.b_tac)
    pair = ad.concat([g_img, g_tac], axis=-1)
    alpha = ad.sigmoid(ad.linear(pair, gate.w_comb, gate.b_comb))
    beta = ad.sub(1.0, alpha)
    return alpha, beta


def scale_features(x: Tensor, r: Tensor) -> Tensor:
    """Elementwise reliability scaling; gradients flow to both operands."""
    return ad.mul(x, r)


def lstm_step(
    h_in: Tensor, state: tuple[Tensor, Tensor], params: RecurrentParams
) -> tuple[tuple[Tensor, Tensor], Tensor]:
    """Standard LSTM cell update; returns (new_state, hidden_output)."""
    hidden, cell = state
    hs = params.hidden_size
    if hidden.shape[-1] != hs or cell.shape[-1] != hs:
        raise ShapeError(f"state must have width {hs}, got {hidden.shape} / {cell.shape}")
    if h_in.shape[-1] != params.input_size:
        raise ShapeError(f"lstm expects input width {params.input_size}, got {h_in.shape}")
    z = ad.add(ad.linear(h_in, params.w_x, params.b), ad.linear(hidden, params.w_h, None))
    i = ad.sigmoid(ad.narrow(z, -1, 0, hs))
    f = ad.sigmoid(ad.narrow(z, -1, hs, hs))
    g = ad.tanh(ad.narrow(z, -1, 2 * hs, hs))
    o = ad.sigmoid(ad.narrow(z, -1, 3 * hs, hs))
    cell2 = ad.add(ad.mul(f, cell), ad.mul(i, g))
    hidden2 = ad.mul(o, ad.tanh(cell2))
    return (hidden2, cell2), hidden2


def pose_head(hidden: Tensor, params: RecurrentParams) -> Tensor:
    """Linear map from the recurrent state to (dx, dy, dtheta)."""
    return ad.linear(hidden, params.w_out, params.b_out)


def init_state(params: ModelParams, batch: int | None) -> tuple[Tensor, Tensor]:
    hs = params.recurrent.hidden_size
    shape = (hs,) if batch is None else (batch, hs)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def step_forward(
    img_t: Tensor | None,
    tac_t: Tensor | None,
    state: tuple[Tensor, Tensor],
    params: ModelParams,
    mode: str,
    gate_override: float | None = None,
) -> tuple[Tensor, tuple[Tensor, Tensor], tuple[np.ndarray, np.ndarray] | None]:
    """One time step: features -> gate/scaling -> LSTM -> pose head.

    Returns (prediction, new_state, (alpha, beta) values or None). The trace
    is populated for the dgml variant and is the fixed pair (1, 1) for
    no-gate; single-branch variants have no trace.
    """
    variant = params.variant
    x_img = x_tac = None
    if params.image_branch is not None:
        if img_t is None:
            raise ValueError(f"variant {variant!r} requires image frames")
        x_img = extract_features(img_t, params.image_branch, mode)
    if params.tactile_branch is not None:
        if tac_t is None:
            raise ValueError(f"variant {variant!r} requires tactile frames")
        x_tac = extract_features(tac_t, params.tactile_branch, mode)

    trace = None
    if variant == "dgml":
        if gate_override is None:
            alpha, beta = gate_forward(x_img, x_tac, params.gate)
        else:
            val = float(gate_override)
            shape = (1,) if x_img.ndim == 1 else (x_img.shape[0], 1)
            alpha = Tensor(np.full(shape, val))
            beta = Tensor(np.full(shape, 1.0 - val))
        fused = ad.concat([scale_features(x_img, alpha), scale_features(x_tac, beta)], axis=-1)
        trace = (alpha.data.reshape(-1).copy(), beta.data.reshape(-1).copy())
    elif variant == "no-gate":
        fused = ad.concat([x_img, x_tac], axis=-1)
        n = 1 if x_img.ndim == 1 else x_img.shape[0]
        trace = (np.ones(n), np.ones(n))
    elif variant == "image-only":
        fused = x_img
    elif variant == "tactile-only":
        fused = x_tac
    else:
        raise ValueError(f"unknown variant {variant!r}")

    state2, hidden = lstm_step(fused, state, params.recurrent)
    pred = pose_head(hidden, params.recurrent)
    return pred, state2, trace


@dataclass
class GateTrace:
    """Per-step reliability values recorded during a forward pass."""

    alphas: np.ndarray
    betas: np.ndarray
    fixed: bool = False  # True for the no-gate variant's constant (1, 1) pair


@dataclass
class SequenceRun:
    predictions: list[Tensor]
    alphas: list[np.ndarray]
    betas: list[np.ndarray]
    states: list[tuple[np.ndarray, np.ndarray]]
    final_state: tuple[Tensor, Tensor]


def run_sequence(
    frames_img: Sequence[Tensor] | None,
    frames_tac: Sequence[Tensor] | None,
    params: ModelParams,
    mode: str = "infer",
    tbptt_window: int = 20,
    gate_override: float | None = None,
    state: tuple[Tensor, Tensor] | None = None,
) -> SequenceRun:
    """Run a whole sequence, cutting differentiation history every
    ``tbptt_window`` steps in training mode while state values carry across
    the cut."""
    if tbptt_window < 1:
        raise ValueError(f"tbptt_window must be >= 1, got {tbptt_window}")
    steps = len(frames_img) if frames_img is not None else len(frames_tac)
    if steps < 1:
        raise ValueError("sequence must have at least one step")
    ref = (frames_img or frames_tac)[0]
    batch = ref.shape[0] if ref.ndim == 4 else None
    if state is None:
        state = init_state(params, batch)

    preds: list[Tensor] = []
    alphas: list[np.ndarray] = []
    betas: list[np.ndarray] = []
    states: list[tuple[np.ndarray, np.ndarray]] = []
    for t in range(steps):
        img_t = frames_img[t] if frames_img is not None else None
        tac_t = frames_tac[t] if frames_tac is not None else None
        pred, state, trace = step_forward(img_t, tac_t, state, params, mode, gate_override)
        preds.append(pred)
        if trace is not None:
            alphas.append(trace[0])
            betas.append(trace[1])
        states.append((state[0].data.copy(), state[1].data.copy()))
        if mode == "train" and (t + 1) % tbptt_window == 0:
            state = (state[0].detach(), state[1].detach())
    return SequenceRun(preds, alphas, betas, states, state)


def forward_sequence(sample, params: ModelParams, mode: str = "infer", tbptt_window: int = 20,
                     gate_override: float | None = None) -> tuple[np.ndarray, GateTrace | None]:
    """Forward one SequenceSample; returns per-step predictions [T,3] in the
    network's normalised output units plus the gate trace, if the variant has
    one."""
    img = np.asarray(sample.frames_image, dtype=np.float64) / 255.0
    tac = np.asarray(sample.frames_tactile, dtype=np.float64) / 255.0
    frames_img = [Tensor(f) for f in img] if params.image_branch is not None else None
    frames_tac = [Tensor(f) for f in tac] if params.tactile_branch is not None else None

    def _run():
        return run_sequence(frames_img, frames_tac, params, mode, tbptt_window, gate_override)

    if mode == "infer":
        with ad.no_grad():
            run = _run()
    else:
        run = _run()
    preds = np.stack([p.data for p in run.predictions])
    trace = None
    if run.alphas:
        trace = GateTrace(
            alphas=np.array([a[0] for a in run.alphas]),
            betas=np.array([b[0] for b in run.betas]),
            fixed=params.variant == "no-gate",
        )
    return preds, trace


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, variant tag, profile tag, then
# (name, rank, dims as u64 LE, f64 LE data) records. Round-trips bit-exactly.

CHECKPOINT_MAGIC = b"DGML"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed or inconsistent checkpoint file."""


def _collect_tensors(params: ModelParams, optimizer_state: dict[str, np.ndarray] | None) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {name: t.data for name, t in params.named_parameters().items()}
    tensors.update(params.named_buffers())
    if optimizer_state:
        for key, arr in optimizer_state.items():
            tensors[f"optim.{key}"] = np.asarray(arr, dtype=np.float64)
    return tensors


def save_checkpoint(path, params: ModelParams, optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    tensors = _collect_tensors(params, optimizer_state)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for tag in (params.variant, params.profile.to_json()):
        raw = tag.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        if arr.ndim:
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at byte {self.pos} "
                f"(need {n}, have {len(self.blob) - self.pos})"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        return self.take(self.u32(f"{what} length"), what).decode("utf-8")


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray] | None]:
    """Rebuild a ModelParams (and optimizer state, if stored) from disk."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0, not a checkpoint file")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    variant = r.string("variant tag")
    try:
        profile = ModelProfile.from_json(r.string("profile tag"))
    except (json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: invalid profile tag: {exc}") from exc
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string("tensor name")
        rank = r.u64("tensor rank")
        dims = tuple(r.u64(f"dim of {name}") for _ in range(rank))
        n_elem = int(np.prod(dims)) if dims else 1
        raw = r.take(8 * n_elem, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes after byte {r.pos}")

    if variant not in VARIANTS:
        raise CheckpointError(f"{path}: unknown variant tag {variant!r}")
    params = make_variant(variant, profile, seed=0)
    expected = dict(params.named_parameters())
    buffers = params.named_buffers()
    model_names = set(expected) | set(buffers)
    file_model = {k for k in tensors if not k.startswith("optim.")}
    if file_model != model_names:
        missing = sorted(model_names - file_model)
        extra = sorted(file_model - model_names)
        raise CheckpointError(f"{path}: tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, tensor in expected.items():
        arr = tensors[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.copy()
    for branch in (params.image_branch, params.tactile_branch):
        if branch is None:
            continue
        for i, blk in enumerate(branch.blocks):
            blk.bn.running_mean = tensors[f"{branch.kind}.block{i}.bn_mean"].copy()
            blk.bn.running_var = tensors[f"{branch.kind}.block{i}.bn_var"].copy()

    optim = {k[len("optim.") :]: v.copy() for k, v in tensors.items() if k.startswith("optim.")}
    return params, (optim or None)
