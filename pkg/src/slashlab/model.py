"""Object-centric model: CNN encoder, iterative slot attention with an optional
logit-smoothing kernel, point prediction/encoding between iterations, and a
spatial-broadcast mixture decoder.

All forward functions are pure in (params, config, explicit noise); no hidden
state. Everything runs on single images (no batch axis); the training harness
loops and averages.

Variants are all driven by config:
  - plain slot attention: kernel kind "identity", no point module, no point init
  - point-supervised init baseline: "identity" + ws_init_enabled
  - kernel ablations: kinds "temperature", "gaussian", "conv", "wnconv"
  - the full model: "wnconv" + ippe_enabled
`plain_sa_forward` is a second, independent code path used to verify that the
full forward collapses to it exactly when every addition is disabled.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DEFAULT_DTYPE, Parameter, Tensor
from .errors import ConfigError, UsageError
from .metrics import Segmentation, hungarian

KERNEL_KINDS = ("identity", "temperature", "gaussian", "conv", "wnconv")
ATTN_COLUMN_EPS = 1e-8  # guard for per-slot pixel normalization
ENC_KERNEL = 3  # encoder/decoder conv size at desk scale


@dataclass(frozen=True)
class KernelVariant:
    kind: str = "identity"
    size: int = 5
    tau: float = 1.0
    gaussian_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"kernel kind {self.kind!r} not in {KERNEL_KINDS}")
        if self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {self.size}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.gaussian_sigma <= 0:
            raise ConfigError(f"gaussian_sigma must be positive, got {self.gaussian_sigma}")


@dataclass(frozen=True)
class ModelConfig:
    H: int = 64
    W: int = 64
    K: int = 7
    D_slot: int = 64
    D_enc: int = 32
    D: int = 64
    T: int = 3
    kernel_variant: KernelVariant = field(default_factory=KernelVariant)
    ippe_enabled: bool = False
    ippe_every_iteration: bool = True
    ws_init_enabled: bool = False

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"need at least 2 slots, got K={self.K}")
        if self.T < 1:
            raise ConfigError(f"need at least 1 iteration, got T={self.T}")
        for name in ("H", "W", "D_slot", "D_enc", "D"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.ippe_enabled and self.ws_init_enabled:
            # both would steer slot positions from points; ablations use one at a time
            raise ConfigError("ippe_enabled and ws_init_enabled are mutually exclusive")


def config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["kernel_variant"] = KernelVariant(**d["kernel_variant"])
    return ModelConfig(**d)


# ------------------------------------------------------------- parameters

def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, rng, dtype=DEFAULT_DTYPE) -> dict:
    """All trainable tensors keyed by stable dotted names (checkpoint keys).

    Only parameters the config actually uses are created, in a fixed draw
    order, so a given (config, seed) always yields the same tensors.
    """
    c = config
    params = {}

    def add(name, arr, constraint=None):
        params[name] = Parameter(np.asarray(arr), name=name, constraint=constraint, dtype=dtype)

    def linear(name, d_in, d_out):
        add(f"{name}.w", _glorot(rng, (d_in, d_out), d_in, d_out))
        add(f"{name}.b", np.zeros(d_out))

    def conv(name, c_in, c_out):
        k = ENC_KERNEL
        add(f"{name}.kernel", _glorot(rng, (k, k, c_in, c_out), k * k * c_in, k * k * c_out))
        add(f"{name}.bias", np.zeros(c_out))

    def ln(name, d):
        add(f"{name}.gain", np.ones(d))
        add(f"{name}.bias", np.zeros(d))

    c_in = 3
    for i in range(1, 5):
        conv(f"enc.conv{i}", c_in, c.D_enc)
        c_in = c.D_enc
    linear("enc.pos", 4, c.D_enc)
    ln("enc.ln", c.D_enc)
    linear("enc.mlp1", c.D_enc, c.D_enc)
    linear("enc.mlp2", c.D_enc, c.D_enc)

    ln("attn.ln_inputs", c.D_enc)
    ln("attn.ln_slots", c.D_slot)
    add("attn.k", _glorot(rng, (c.D_enc, c.D), c.D_enc, c.D))
    add("attn.q", _glorot(rng, (c.D_slot, c.D), c.D_slot, c.D))
    add("attn.v", _glorot(rng, (c.D_enc, c.D_slot), c.D_enc, c.D_slot))

    for gate in ("z", "r", "h"):
        add(f"gru.w_{gate}", _glorot(rng, (c.D_slot, c.D_slot), c.D_slot, c.D_slot))
        add(f"gru.u_{gate}", _glorot(rng, (c.D_slot, c.D_slot), c.D_slot, c.D_slot))
        add(f"gru.b_{gate}", np.zeros(c.D_slot))
    ln("mlp.ln", c.D_slot)
    linear("mlp.fc1", c.D_slot, c.D_slot)
    linear("mlp.fc2", c.D_slot, c.D_slot)

    add("slots.mu", _glorot(rng, (c.D_slot,), 1, c.D_slot))
    add("slots.sigma", np.ones(c.D_slot))

    kind = c.kernel_variant.kind
    s = c.kernel_variant.size
    if kind == "wnconv":
        # zeros -> softmax gives the uniform simplex kernel at step 0
        add("ark.raw", np.zeros((s, s)), constraint="simplex_kernel")
    elif kind == "conv":
        delta = np.zeros((s, s))
        delta[s // 2, s // 2] = 1.0
        add("ark.raw", delta)

    if c.ippe_enabled:
        linear("ippe.pred1", c.D_slot, c.D_slot)
        linear("ippe.pred2", c.D_slot, c.D_slot)
        linear("ippe.pred3", c.D_slot, 2)
        linear("ippe.enc1", 2, c.D_slot)
        linear("ippe.enc2", c.D_slot, c.D_slot)
        linear("ippe.enc3", c.D_slot, c.D_slot)

    if c.ws_init_enabled:
        linear("ws.fc1", 2, c.D_slot)
        linear("ws.fc2", c.D_slot, c.D_slot)

    linear("dec.pos", 4, c.D_slot)
    c_in = c.D_slot
    for i in range(1, 5):
        conv(f"dec.conv{i}", c_in, 4 if i == 4 else c.D_slot)
        c_in = c.D_slot

    return params


def _simplex_kernel_ok(param) -> bool:
    k = _reparam_simplex(param).data
    return bool((k >= 0.0).all() and abs(k.sum() - 1.0) <= 1e-6)


Parameter.register_constraint("simplex_kernel", _simplex_kernel_ok)


# ----------------------------------------------------------- shared pieces

def coordinate_grid(H: int, W: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """HW x 4 constant grid (x, y, 1-x, 1-y) at pixel centers."""
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    grid = np.stack([gx, gy, 1.0 - gx, 1.0 - gy], axis=-1).reshape(H * W, 4)
    return Tensor(grid, dtype=dtype)


def _linear(x, params, name):
    return ad.matmul(x, params[f"{name}.w"]) + params[f"{name}.b"]


def _ln(x, params, name):
    return ad.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"], axis=-1)


def _onehot(n, i, dtype):
    row = np.zeros((1, n))
    row[0, i] = 1.0
    return Tensor(row, dtype=dtype)


def _dtype_of(params):
    return next(iter(params.values())).data.dtype


# ----------------------------------------------------------------- encoder

def encode_image(image: Tensor, params: dict, config: ModelConfig) -> Tensor:
    """H x W x 3 image -> HW x D_enc feature rows."""
    if image.data.shape != (config.H, config.W, 3):
        from .errors import ShapeError
        raise ShapeError(f"expected image {(config.H, config.W, 3)}, got {image.data.shape}")
    x = image
    for i in range(1, 5):
        x = ad.relu(ad.conv2d(x, params[f"enc.conv{i}.kernel"],
                              params[f"enc.conv{i}.bias"], pad_mode="zero"))
    flat = ad.reshape(x, (config.H * config.W, config.D_enc))
    grid = coordinate_grid(config.H, config.W, dtype=_dtype_of(params))
    flat = flat + _linear(grid, params, "enc.pos")
    flat = _ln(flat, params, "enc.ln")
    hidden = ad.relu(_linear(flat, params, "enc.mlp1"))
    return _linear(hidden, params, "enc.mlp2")


# --------------------------------------------------------------- attention

@dataclass
class AttentionField:
    """Per-iteration attention tensors. Layout is HW x K throughout."""

    M: Tensor      # pre-softmax logits
    attn: Tensor   # softmax over the slot axis (each pixel competes)
    W: Tensor      # attn normalized per slot column over pixels
    N: int         # pixel count HW
    M_raw: Tensor = None  # logits before kernel refinement (viz only)


def scaled_dot_logits(k_feats: Tensor, q_slots: Tensor, D: int) -> Tensor:
    return ad.scale(ad.matmul(k_feats, ad.transpose(q_slots)), 1.0 / np.sqrt(D))


def attention_logits(features: Tensor, slots: Tensor, params: dict,
                     config: ModelConfig) -> Tensor:
    """HW x K logits: layer-normed projections, dot product scaled by 1/sqrt(D)."""
    k_feats = ad.matmul(_ln(features, params, "attn.ln_inputs"), params["attn.k"])
    q_slots = ad.matmul(_ln(slots, params, "attn.ln_slots"), params["attn.q"])
    return scaled_dot_logits(k_feats, q_slots, config.D)


def ark_effective_kernel(variant: KernelVariant, params: dict = None,
                         dtype=DEFAULT_DTYPE) -> Tensor:
    """The s x s kernel a variant actually convolves with.

    "wnconv" reparametrizes raw weights through a softmax over all s^2 entries,
    so nonnegativity and sum-to-one hold by construction at every step, not
    via post-hoc projection.
    """
    s = variant.size
    if variant.kind == "temperature":
        raise UsageError("temperature variant has no kernel; tau is used by the softmax")
    if variant.kind == "identity":
        delta = np.zeros((s, s))
        delta[s // 2, s // 2] = 1.0
        return Tensor(delta, dtype=dtype)
    if variant.kind == "gaussian":
        c = s // 2
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        g = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2.0 * variant.gaussian_sigma ** 2))
        return Tensor(g / g.sum(), dtype=dtype)
    if params is None or "ark.raw" not in params:
        raise UsageError(f"{variant.kind} kernel needs the ark.raw parameter")
    if variant.kind == "conv":
        return params["ark.raw"]
    return _reparam_simplex(params["ark.raw"])


def _reparam_simplex(raw) -> Tensor:
    s = raw.data.shape[0]
    flat = ad.reshape(raw, (s * s,))
    return ad.reshape(ad.softmax(flat, axis=0), (s, s))


def ark_apply(M: Tensor, variant: KernelVariant, H: int, W: int,
              params: dict = None) -> Tensor:
    """Convolve each slot's logit map with the effective kernel (replicate pad).

    "identity" and "temperature" return the input unchanged (for the latter,
    tau is consumed downstream by the softmax).
    """
    if variant.kind in ("identity", "temperature"):
        return M
    HW, K = M.data.shape
    if HW != H * W:
        from .errors import ShapeError
        raise ShapeError(f"logit rows {HW} != H*W = {H * W}")
    kernel = ark_effective_kernel(variant, params, dtype=M.data.dtype)
    cols = []
    for j in range(K):
        col = ad.matmul(M, ad.transpose(_onehot(K, j, M.data.dtype)))  # HW x 1
        smooth = ad.conv2d_single(ad.reshape(col, (H, W)), kernel)
        cols.append(ad.reshape(smooth, (HW,)))
    return ad.stack(cols, axis=1)


def attention_normalize(M_refined: Tensor, tau: float = 1.0) -> AttentionField:
    """Softmax over slots per pixel, then per-slot normalization over pixels."""
    attn = ad.softmax(M_refined, axis=1, temperature=tau)
    col_sums = ad.reduce_sum(attn, axis=0, keepdims=True)  # 1 x K
    W = ad.div(attn, ad.add_scalar(col_sums, ATTN_COLUMN_EPS))
    return AttentionField(M=M_refined, attn=attn, W=W, N=M_refined.data.shape[0])


def slot_update(slots: Tensor, features: Tensor, attn_field: AttentionField,
                params: dict) -> Tensor:
    """Weighted mean of value vectors per slot, recurrent gate, residual MLP."""
    v_feats = ad.matmul(_ln(features, params, "attn.ln_inputs"), params["attn.v"])
    updates = ad.matmul(ad.transpose(attn_field.W), v_feats)  # K x D_slot
    gru = ad.GRUParams(*[params[f"gru.{n}_{g}"] for g in ("z", "r", "h")
                         for n in ("w", "u", "b")])
    slots = ad.gru_cell(slots, updates, gru)
    h = ad.relu(_linear(_ln(slots, params, "mlp.ln"), params, "mlp.fc1"))
    return slots + _linear(h, params, "mlp.fc2")


# -------------------------------------------------------------- point module

@dataclass
class IppeResult:
    slots: Tensor             # slots after the encoded points were added
    predicted_points: Tensor  # K x 2 in [0,1]^2
    routed_points: np.ndarray  # what the encoder actually consumed (K x 2)
    gt_mask: np.ndarray       # K, 1.0 where a ground-truth point was routed


def _mlp3(x, params, prefix):
    h = ad.relu(_linear(x, params, f"{prefix}1"))
    h = ad.relu(_linear(h, params, f"{prefix}2"))
    return _linear(h, params, f"{prefix}3")


def ippe_step(slots: Tensor, params: dict, gt_points: np.ndarray = None) -> IppeResult:
    """Predict a point per slot, encode a point per slot, add to the slots.

    With gt_points (the m x 2 annotated subset, training mode), each point is
    matched to a distinct slot by squared distance and the encoder consumes the
    ground-truth coordinate for those slots; every other slot gets its own
    prediction. The match uses the prediction's values only, so no gradient
    flows through the assignment.
    """
    K = slots.data.shape[0]
    pred = ad.sigmoid(_mlp3(slots, params, "ippe.pred"))  # K x 2, in (0,1)
    if gt_points is not None:
        gt_full, gt_mask = match_points_to_slots(pred.data, np.asarray(gt_points), K)
        dtype = _dtype_of(params)
        mask = Tensor(gt_mask.reshape(-1, 1), dtype=dtype)
        keep = Tensor(1.0 - gt_mask.reshape(-1, 1), dtype=dtype)
        enc_in = ad.mul(mask, Tensor(gt_full, dtype=dtype)) + ad.mul(keep, pred)
    else:
        gt_mask = np.zeros(K)
        enc_in = pred
    encoded = _mlp3(enc_in, params, "ippe.enc")
    return IppeResult(slots=slots + encoded, predicted_points=pred,
                      routed_points=enc_in.data.copy(), gt_mask=gt_mask.copy())


def match_points_to_slots(pred_points: np.ndarray, annotated: np.ndarray,
                          K: int) -> tuple:
    """Assign each annotated gt point to a distinct slot by squared distance.

    Returns (gt_full K x 2, gt_mask K) with rows of gt_full zero where no point
    was routed. The matching itself is non-differentiable by construction.
    """
    m = annotated.shape[0]
    if m > K:
        raise ConfigError(f"{m} annotated points exceed K={K} slots")
    diff = pred_points[:, None, :] - annotated[None, :, :]
    cost = (diff ** 2).sum(axis=2)  # K x m
    pairs = hungarian(cost)
    gt_full = np.zeros((K, 2))
    gt_mask = np.zeros(K)
    for slot_i, point_j in pairs:
        gt_full[slot_i] = annotated[point_j]
        gt_mask[slot_i] = 1.0
    return gt_full, gt_mask


# ----------------------------------------------------------------- decoder

@dataclass
class DecoderOutput:
    per_slot_rgb: Tensor          # K x HW x 3
    per_slot_alpha_logits: Tensor  # HW x K
    mixture: Tensor               # HW x K, rows sum to 1
    reconstruction: Tensor        # HW x 3


def decode_slots(slots: Tensor, params: dict, config: ModelConfig) -> DecoderOutput:
    """Broadcast each slot over the grid, run the shared CNN, alpha-composite."""
    H, W, K = config.H, config.W, config.K
    HW = H * W
    dtype = _dtype_of(params)
    grid = coordinate_grid(H, W, dtype=dtype)
    pos = _linear(grid, params, "dec.pos")  # HW x D_slot
    ones_col = Tensor(np.ones((HW, 1)), dtype=dtype)
    take_rgb = Tensor(np.eye(4)[:, :3], dtype=dtype)
    take_alpha = Tensor(np.eye(4)[:, 3:], dtype=dtype)

    rgb_list = []
    alpha_list = []
    for j in range(K):
        slot_row = ad.matmul(_onehot(K, j, dtype), slots)  # 1 x D_slot
        x = ad.matmul(ones_col, slot_row) + pos
        x = ad.reshape(x, (H, W, config.D_slot))
        for i in range(1, 5):
            x = ad.conv2d(x, params[f"dec.conv{i}.kernel"],
                          params[f"dec.conv{i}.bias"], pad_mode="zero")
            if i < 4:
                x = ad.relu(x)
        flat = ad.reshape(x, (HW, 4))
        rgb_list.append(ad.matmul(flat, take_rgb))
        alpha_list.append(ad.reshape(ad.matmul(flat, take_alpha), (HW,)))

    alpha_logits = ad.stack(alpha_list, axis=1)  # HW x K
    mixture = ad.softmax(alpha_logits, axis=1)
    recon = None
    for j in range(K):
        weight = ad.matmul(mixture, ad.transpose(_onehot(K, j, dtype)))  # HW x 1
        contrib = ad.mul(weight, rgb_list[j])
        recon = contrib if recon is None else recon + contrib
    return DecoderOutput(per_slot_rgb=ad.stack(rgb_list, axis=0),
                         per_slot_alpha_logits=alpha_logits,
                         mixture=mixture, reconstruction=recon)


# ------------------------------------------------------------ full forward

@dataclass
class ForwardResult:
    slots: Tensor
    fields: list          # AttentionField per iteration
    points: list          # K x 2 predictions per point-module application
    routing: list         # IppeResult per application (instrumentation)
    decoder: DecoderOutput
    features: Tensor


def draw_slot_noise(rng, config: ModelConfig) -> np.ndarray:
    return rng.standard_normal((config.K, config.D_slot))


def init_slots(params: dict, noise: np.ndarray) -> Tensor:
    """slots = mu + sigma * noise, rows independent."""
    noise_t = Tensor(noise, dtype=_dtype_of(params))
    return ad.mul(params["slots.sigma"], noise_t) + params["slots.mu"]


def ws_init_slots(params: dict, noise: np.ndarray, annotated: np.ndarray,
                  config: ModelConfig) -> Tensor:
    """Seed the first slots from annotated points; surplus slots stay Gaussian."""
    K = config.K
    m = annotated.shape[0]
    if m > K:
        raise ConfigError(f"{m} annotated points exceed K={K} slots")
    gauss = init_slots(params, noise)
    if m == 0:
        return gauss
    dtype = _dtype_of(params)
    pts = Tensor(np.asarray(annotated, dtype=np.float64), dtype=dtype)
    seeded = _linear(ad.relu(_linear(pts, params, "ws.fc1")), params, "ws.fc2")  # m x D_slot
    place = np.zeros((K, m))
    place[np.arange(m), np.arange(m)] = 1.0
    keep = np.eye(K)
    keep[np.arange(m), np.arange(m)] = 0.0
    return ad.matmul(Tensor(place, dtype=dtype), seeded) + \
        ad.matmul(Tensor(keep, dtype=dtype), gauss)


def _annotated_points(annotations) -> np.ndarray:
    pts = np.asarray(annotations["points"], dtype=np.float64).reshape(-1, 2)
    idx = np.asarray(annotations["indices"], dtype=np.int64)
    return pts[idx - 1]


def slash_forward(image: Tensor, params: dict, config: ModelConfig,
                  noise: np.ndarray, mode: str = "train",
                  annotations: dict = None) -> ForwardResult:
    """Encode, iterate attention T times, decode.

    annotations = {"points": n x 2 visible gt points, "indices": 1-based ids of
    the annotated subset}; only consumed in train mode (point routing and, when
    enabled, point-based slot init). Passing annotations at eval is an error:
    the experimental protocol never shows ground truth at inference.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" and annotations is not None:
        raise UsageError("annotations are not consumed at eval time")
    variant = config.kernel_variant
    tau = variant.tau if variant.kind == "temperature" else 1.0

    features = encode_image(image, params, config)
    if config.ws_init_enabled and annotations is not None:
        slots = ws_init_slots(params, noise, _annotated_points(annotations), config)
    else:
        slots = init_slots(params, noise)

    fields = []
    points = []
    routing = []
    for t in range(config.T):
        M_raw = attention_logits(features, slots, params, config)
        M = ark_apply(M_raw, variant, config.H, config.W, params)
        attn_field = attention_normalize(M, tau=tau)
        attn_field.M_raw = M_raw
        slots = slot_update(slots, features, attn_field, params)
        fields.append(attn_field)
        if config.ippe_enabled and (config.ippe_every_iteration or t == config.T - 1):
            gt = None
            if mode == "train" and annotations is not None:
                gt = _annotated_points(annotations)
            step = ippe_step(slots, params, gt_points=gt)
            slots = step.slots
            points.append(step.predicted_points)
            routing.append(step)

    return ForwardResult(slots=slots, fields=fields, points=points,
                         routing=routing, decoder=decode_slots(slots, params, config),
                         features=features)


def plain_sa_forward(image: Tensor, params: dict, config: ModelConfig,
                     noise: np.ndarray) -> ForwardResult:
    """Reference slot attention loop with none of the additions, written
    separately so the reduction property is a check between two code paths."""
    features = encode_image(image, params, config)
    slots = init_slots(params, noise)
    fields = []
    for _ in range(config.T):
        M = attention_logits(features, slots, params, config)
        attn_field = attention_normalize(M, tau=1.0)
        slots = slot_update(slots, features, attn_field, params)
        fields.append(attn_field)
    return ForwardResult(slots=slots, fields=fields, points=[], routing=[],
                         decoder=decode_slots(slots, params, config),
                         features=features)


def masks_from_model(output, config: ModelConfig, source: str = "decoder") -> Segmentation:
    """Per-pixel argmax over slots; ties go to the lowest slot index."""
    if source not in ("decoder", "attention"):
        raise UsageError(f"source must be 'decoder' or 'attention', got {source!r}")
    if isinstance(output, ForwardResult):
        scores = output.decoder.mixture if source == "decoder" else output.fields[-1].attn
    elif isinstance(output, DecoderOutput):
        scores = output.mixture
    elif isinstance(output, AttentionField):
        scores = output.attn
    else:
        raise UsageError(f"cannot extract masks from {type(output).__name__}")
    labels = np.argmax(scores.data, axis=1).reshape(config.H, config.W)
    return Segmentation(labels)
