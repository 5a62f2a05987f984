"""Toy RNN-transducer: LSTM encoder stack, prediction network, joint layer.

Parameters live in named groups ("enc.0".."enc.L-1", "dec", "joint") so
finetuning can freeze arbitrary subsets. Forward passes are pure
functions of (inputs, params); training-time passes additionally return
activation caches for backpropagation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .features import FeatureConfig, SuperFrameMatrix

BLANK = 0

LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class Vocab:
    """Output graphemes; index 0 is the blank transition symbol."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(self.symbols) < 2:
            raise ConfigError("vocabulary needs blank plus at least one symbol")
        if self.symbols[0] != "":
            raise ConfigError("blank must be the empty string at index 0")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError("vocabulary symbols must be unique")

    @classmethod
    def graphemes(cls) -> "Vocab":
        return cls(symbols=("",) + tuple(LETTERS) + (" ", "'"))

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            return np.array([index[ch] for ch in text], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, indices) -> str:
        return "".join(self.symbols[i] for i in indices)


@dataclass(frozen=True)
class ModelConfig:
    encoder_layers: int = 3
    hidden: int = 64
    joint_hidden: int = 64
    stack_factor: int = 3
    mel_bins: int = 80
    # Decoder width; kept much narrower than the encoder by benchmark
    # configs so the prediction network cannot simply memorize the
    # training sentences and ignore acoustics.
    dec_hidden: int | None = None

    def __post_init__(self):
        if self.encoder_layers < 2:
            raise ConfigError("need at least 2 encoder layers for layer sweeps")
        if min(self.hidden, self.joint_hidden, self.stack_factor, self.mel_bins) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.dec_hidden is not None and self.dec_hidden < 1:
            raise ConfigError("dec_hidden must be positive")

    @property
    def decoder_width(self) -> int:
        return self.dec_hidden if self.dec_hidden is not None else self.hidden

    @property
    def input_dim(self) -> int:
        return self.mel_bins * self.stack_factor


ParamGroup = dict[str, np.ndarray]
Params = dict[str, ParamGroup]

# Fixed affine applied to log-mel super-frames at the encoder input.
# The clamp bounds the clean-audio log floor (log 1e-10 ~ -23) so silent
# regions stay within the range noised training audio occupies.
INPUT_FLOOR = -4.0
INPUT_SHIFT = 1.5
INPUT_SCALE = 2.5


def normalize_input(frames: np.ndarray) -> np.ndarray:
    return (np.clip(frames, INPUT_FLOOR, None) + INPUT_SHIFT) / INPUT_SCALE


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    vocab: Vocab
    feature: FeatureConfig
    params: Params
    step: int = 0

    def __post_init__(self):
        expected = encoder_group_names(self.config.encoder_layers) + ["dec", "joint"]
        if sorted(self.params) != sorted(expected):
            raise DataError(f"checkpoint groups {sorted(self.params)} != {sorted(expected)}")

    @property
    def group_names(self) -> list[str]:
        return encoder_group_names(self.config.encoder_layers) + ["dec", "joint"]

    def clone_params(self) -> Params:
        return {g: {k: v.copy() for k, v in t.items()} for g, t in self.params.items()}


def encoder_group_names(layers: int) -> list[str]:
    return [f"enc.{i}" for i in range(layers)]


def init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> Params:
    """Seeded fan-scaled uniform init.

    Weight matrices draw from uniform(+-sqrt(6 / (fan_in + fan_out))),
    biases start at zero except the LSTM forget gates (+1, keeps early
    memory) and the blank output logit (+2, matches the blank-dominant
    phase transduction training passes through anyway).
    """
    rng = np.random.default_rng(seed)

    def u(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    def lstm_bias(h_dim):
        b = np.zeros(4 * h_dim)
        b[h_dim : 2 * h_dim] = 1.0
        return b

    h, hj, hd = cfg.hidden, cfg.joint_hidden, cfg.decoder_width
    params: Params = {}
    in_dim = cfg.input_dim
    for name in encoder_group_names(cfg.encoder_layers):
        params[name] = {"wx": u(in_dim, 4 * h), "wh": u(h, 4 * h), "b": lstm_bias(h)}
        in_dim = h
    params["dec"] = {
        "embed": u(vocab_size, hd),
        "wx": u(hd, 4 * hd),
        "wh": u(hd, 4 * hd),
        "b": lstm_bias(hd),
    }
    out_b = np.zeros(vocab_size)
    out_b[BLANK] = 2.0
    params["joint"] = {
        "proj_w": u(h + hd, hj),
        "proj_b": np.zeros(hj),
        "out_w": u(hj, vocab_size),
        "out_b": out_b,
    }
    return params


def init_checkpoint(cfg: ModelConfig, vocab: Vocab, feature: FeatureConfig, seed: int) -> ModelCheckpoint:
    return ModelCheckpoint(
        config=cfg, vocab=vocab, feature=feature,
        params=init_params(cfg, len(vocab), seed), step=0,
    )


def count_parameters(params: Params) -> int:
    return sum(int(t.size) for group in params.values() for t in group.values())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class LstmCache:
    """Per-layer activations retained for backpropagation through time."""

    x: np.ndarray       # (B, T, D) layer input
    gates: np.ndarray   # (B, T, 4H) activated gates in [i, f, g, o] order
    c: np.ndarray       # (B, T, H) cell states
    tanh_c: np.ndarray  # (B, T, H)
    h: np.ndarray       # (B, T, H) hidden states


def lstm_forward(x: np.ndarray, g: ParamGroup) -> tuple[np.ndarray, LstmCache]:
    """Unidirectional LSTM over (B, T, D); gate order [input, forget, cell, output]."""
    b_sz, t_len, _ = x.shape
    h_dim = g["wh"].shape[0]
    zx = x @ g["wx"] + g["b"]
    gates = np.empty((b_sz, t_len, 4 * h_dim))
    cs = np.empty((b_sz, t_len, h_dim))
    tanh_cs = np.empty((b_sz, t_len, h_dim))
    hs = np.empty((b_sz, t_len, h_dim))
    h = np.zeros((b_sz, h_dim))
    c = np.zeros((b_sz, h_dim))
    for t in range(t_len):
        z = zx[:, t] + h @ g["wh"]
        gi = _sigmoid(z[:, :h_dim])
        gf = _sigmoid(z[:, h_dim:2 * h_dim])
        gg = np.tanh(z[:, 2 * h_dim:3 * h_dim])
        go = _sigmoid(z[:, 3 * h_dim:])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        gates[:, t, :h_dim] = gi
        gates[:, t, h_dim:2 * h_dim] = gf
        gates[:, t, 2 * h_dim:3 * h_dim] = gg
        gates[:, t, 3 * h_dim:] = go
        cs[:, t] = c
        tanh_cs[:, t] = tc
        hs[:, t] = h
    return hs, LstmCache(x=x, gates=gates, c=cs, tanh_c=tanh_cs, h=hs)


def lstm_backward(dh_out: np.ndarray, cache: LstmCache, g: ParamGroup):
    """BPTT for lstm_forward; returns (dx, {dwx, dwh, db})."""
    b_sz, t_len, h_dim = cache.h.shape
    dwx = np.zeros_like(g["wx"])
    dwh = np.zeros_like(g["wh"])
    dz_all = np.empty((b_sz, t_len, 4 * h_dim))
    dh_next = np.zeros((b_sz, h_dim))
    dc_next = np.zeros((b_sz, h_dim))
    wh_t = g["wh"].T
    for t in range(t_len - 1, -1, -1):
        gi = cache.gates[:, t, :h_dim]
        gf = cache.gates[:, t, h_dim:2 * h_dim]
        gg = cache.gates[:, t, 2 * h_dim:3 * h_dim]
        go = cache.gates[:, t, 3 * h_dim:]
        tc = cache.tanh_c[:, t]
        c_prev = cache.c[:, t - 1] if t > 0 else np.zeros((b_sz, h_dim))
        dh = dh_out[:, t] + dh_next
        dc = dh * go * (1.0 - tc * tc) + dc_next
        dz = np.concatenate(
            [
                dc * gg * gi * (1.0 - gi),
                dc * c_prev * gf * (1.0 - gf),
                dc * gi * (1.0 - gg * gg),
                dh * tc * go * (1.0 - go),
            ],
            axis=1,
        )
        dz_all[:, t] = dz
        dh_next = dz @ wh_t
        dc_next = dc * gf
        if t > 0:
            dwh += cache.h[:, t - 1].T @ dz
    flat_dz = dz_all.reshape(b_sz * t_len, 4 * h_dim)
    dwx = cache.x.reshape(b_sz * t_len, -1).T @ flat_dz
    db = flat_dz.sum(axis=0)
    dx = dz_all @ g["wx"].T
    return dx, {"wx": dwx, "wh": dwh, "b": db}


def encoder_forward(x: np.ndarray, params: Params, layers: int) -> tuple[np.ndarray, list[LstmCache]]:
    """Run the encoder stack over a (B, T', D) batch, keeping caches.

    Applies the fixed input normalization, so callers pass raw log-mel
    super-frames.
    """
    caches = []
    h = normalize_input(x)
    for name in encoder_group_names(layers):
        h, cache = lstm_forward(h, params[name])
        caches.append(cache)
    return h, caches


def decoder_forward(labels: np.ndarray, params: Params) -> tuple[np.ndarray, LstmCache, np.ndarray]:
    """Prediction network over one label sequence.

    Row 0 is the blank-history start state (the blank embedding fed as a
    start token); row u conditions on labels[:u].
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DataError("labels must be a 1-D index sequence")
    if len(labels) and labels.min() < 1:
        raise DataError("blank is not a valid decoder input label")
    dec = params["dec"]
    if len(labels) and labels.max() >= dec["embed"].shape[0]:
        raise DataError("label index outside vocabulary")
    tokens = np.concatenate([[BLANK], labels])
    x = dec["embed"][tokens][None, :, :]
    h, cache = lstm_forward(x, dec)
    return h[0], cache, tokens


def joint_forward(enc: np.ndarray, pred: np.ndarray, params: Params):
    """Logit lattice (T', U+1, V) and its log-softmax, plus a cache."""
    joint = params["joint"]
    h = enc.shape[1]
    if pred.shape[1] != joint["proj_w"].shape[0] - h:
        raise DataError("encoder/decoder widths inconsistent with joint projection")
    enc_proj = enc @ joint["proj_w"][:h]
    dec_proj = pred @ joint["proj_w"][h:]
    act = np.tanh(enc_proj[:, None, :] + dec_proj[None, :, :] + joint["proj_b"])
    logits = act @ joint["out_w"] + joint["out_b"]
    m = logits.max(axis=-1, keepdims=True)
    log_probs = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    return logits, log_probs, act


def joint_backward(dlogits: np.ndarray, act: np.ndarray, enc: np.ndarray, pred: np.ndarray, params: Params):
    """Backprop through the joint; returns (denc, dpred, grads)."""
    joint = params["joint"]
    h = enc.shape[1]
    t_len, u1, hj = act.shape
    flat_act = act.reshape(t_len * u1, hj)
    flat_dlogits = dlogits.reshape(t_len * u1, -1)
    dout_w = flat_act.T @ flat_dlogits
    dout_b = flat_dlogits.sum(axis=0)
    dact = (flat_dlogits @ joint["out_w"].T).reshape(t_len, u1, hj)
    dpre = dact * (1.0 - act * act)
    denc_proj = dpre.sum(axis=1)
    ddec_proj = dpre.sum(axis=0)
    dproj_w = np.concatenate([enc.T @ denc_proj, pred.T @ ddec_proj], axis=0)
    dproj_b = dpre.sum(axis=(0, 1))
    denc = denc_proj @ joint["proj_w"][:h].T
    dpred = ddec_proj @ joint["proj_w"][h:].T
    grads = {"proj_w": dproj_w, "proj_b": dproj_b, "out_w": dout_w, "out_b": dout_b}
    return denc, dpred, grads


def _as_superframes(x) -> np.ndarray:
    if isinstance(x, SuperFrameMatrix):
        return np.asarray(x.frames, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def encode(x, ckpt_or_params, layers: int | None = None) -> np.ndarray:
    """Encoder output (T' x H) for one utterance."""
    if isinstance(ckpt_or_params, ModelCheckpoint):
        params, layers = ckpt_or_params.params, ckpt_or_params.config.encoder_layers
    else:
        params = ckpt_or_params
        if layers is None:
            layers = len([g for g in params if g.startswith("enc.")])
    frames = _as_superframes(x)
    if frames.ndim != 2 or frames.shape[1] != params["enc.0"]["wx"].shape[0]:
        raise DataError(
            f"input width {frames.shape} does not match encoder input "
            f"width {params['enc.0']['wx'].shape[0]}"
        )
    h, _ = encoder_forward(frames[None, :, :], params, layers)
    return h[0]


def predict(labels, ckpt_or_params) -> np.ndarray:
    """Prediction-network outputs ((U+1) x H) for one label sequence."""
    params = ckpt_or_params.params if isinstance(ckpt_or_params, ModelCheckpoint) else ckpt_or_params
    out, _, _ = decoder_forward(np.asarray(labels), params)
    return out


def joint(enc: np.ndarray, pred: np.ndarray, ckpt_or_params):
    """Logit lattice and log-softmax lattice for (encoded, predicted) pair."""
    params = ckpt_or_params.params if isinstance(ckpt_or_params, ModelCheckpoint) else ckpt_or_params
    logits, log_probs, _ = joint_forward(np.asarray(enc), np.asarray(pred), params)
    return logits, log_probs


def greedy_decode(ckpt: ModelCheckpoint, x, max_symbols_per_frame: int = 8) -> str:
    """Best-path decoding: blank advances time, labels extend the prefix."""
    if max_symbols_per_frame <= 0:
        raise ConfigError("max_symbols_per_frame must be positive")
    params = ckpt.params
    enc = encode(x, ckpt)
    dec = params["dec"]
    h_dim = dec["wh"].shape[0]
    enc_width = enc.shape[1]
    joint_p = params["joint"]
    enc_proj = enc @ joint_p["proj_w"][:enc_width]

    h = np.zeros(h_dim)
    c = np.zeros(h_dim)

    def dec_step(token: int, h, c):
        z = dec["embed"][token] @ dec["wx"] + h @ dec["wh"] + dec["b"]
        gi = _sigmoid(z[:h_dim])
        gf = _sigmoid(z[h_dim:2 * h_dim])
        gg = np.tanh(z[2 * h_dim:3 * h_dim])
        go = _sigmoid(z[3 * h_dim:])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        return h, c

    h, c = dec_step(BLANK, h, c)
    out: list[int] = []
    for t in range(enc.shape[0]):
        emitted = 0
        while emitted < max_symbols_per_frame:
            pre = np.tanh(enc_proj[t] + h @ joint_p["proj_w"][enc_width:] + joint_p["proj_b"])
            logits = pre @ joint_p["out_w"] + joint_p["out_b"]
            sym = int(np.argmax(logits))
            if sym == BLANK:
                break
            out.append(sym)
            h, c = dec_step(sym, h, c)
            emitted += 1
    return ckpt.vocab.decode(out)


# ------------------------------------------------------------ checkpoint IO

CKPT_MAGIC = b"RNTC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")


def _tensor_entries(params: Params) -> list[tuple[str, np.ndarray]]:
    out = []
    for group in sorted(params):
        for name in sorted(params[group]):
            out.append((f"{group}/{name}", params[group][name]))
    return out


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Serialize with a JSON manifest and little-endian float32 tensors."""
    entries = _tensor_entries(ckpt.params)
    tensors = []
    offset = 0
    blobs = []
    for name, arr in entries:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "config": {
            "encoder_layers": ckpt.config.encoder_layers,
            "hidden": ckpt.config.hidden,
            "joint_hidden": ckpt.config.joint_hidden,
            "stack_factor": ckpt.config.stack_factor,
            "mel_bins": ckpt.config.mel_bins,
        },
        "feature": {
            "window_ms": ckpt.feature.window_ms,
            "hop_ms": ckpt.feature.hop_ms,
            "mel_bins": ckpt.feature.mel_bins,
            "log_floor": ckpt.feature.log_floor,
            "fft_size": ckpt.feature.fft_size,
        },
        "vocab": list(ckpt.vocab.symbols),
        "step": ckpt.step,
        "tensors": tensors,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        header = fh.read(_CKPT_HEADER.size)
        if len(header) != _CKPT_HEADER.size:
            raise DataError(f"{path}: truncated checkpoint header")
        magic, version, manifest_len = _CKPT_HEADER.unpack(header)
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        data = fh.read()
    params: Params = {}
    for entry in manifest["tensors"]:
        group, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data[start:start + 4 * count], dtype="<f4")
        if arr.size != count:
            raise DataError(f"{path}: truncated tensor {entry['name']}")
        params.setdefault(group, {})[name] = arr.reshape(shape).astype(np.float64)
    return ModelCheckpoint(
        config=ModelConfig(**manifest["config"]),
        vocab=Vocab(symbols=tuple(manifest["vocab"])),
        feature=FeatureConfig(**manifest["feature"]),
        params=params,
        step=int(manifest["step"]),
    )
