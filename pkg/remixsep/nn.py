"""Toy mask estimator, discriminator, Adam optimizer and checkpoint files."""

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from remixsep import autodiff as ad
from remixsep.autodiff import DiffTensor
from remixsep.errors import CheckpointError, SeparatorError
from remixsep.seeding import rng_for

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "remixsep-checkpoint/1"
LOG_FLOOR = 1e-8


class Module:
    """Container of named trainable leaves and child modules."""

    def named_children(self) -> Dict[str, "Module"]:
        return {}

    def own_parameters(self) -> Dict[str, DiffTensor]:
        return {}

    def parameters(self) -> Dict[str, DiffTensor]:
        params = dict(self.own_parameters())
        for child_name, child in self.named_children().items():
            for name, p in child.parameters().items():
                params[f"{child_name}.{name}"] = p
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise CheckpointError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"Shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.value[...] = value

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Linear(Module):
    """Affine layer with uniform fan-in initialisation."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(n_in, n_out)), "weight")
        self.bias = ad.parameter(rng.uniform(-bound, bound, size=(n_out,)), "bias")

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: DiffTensor) -> DiffTensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    """Valid, strided 2-D convolution over (channel, height, width) via patch gathering."""

    def __init__(self, in_channels: int, out_channels: int, kernel: Tuple[int, int],
                 stride: Tuple[int, int], rng: np.random.Generator):
        self.in_channels = in_channels
        self.kernel = kernel
        self.stride = stride
        fan_in = in_channels * kernel[0] * kernel[1]
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, out_channels)), "weight")
        self.bias = ad.parameter(rng.uniform(-bound, bound, size=(out_channels,)), "bias")
        self._index_cache: Dict[tuple, tuple] = {}

    def own_parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        return ((height - self.kernel[0]) // self.stride[0] + 1,
                (width - self.kernel[1]) // self.stride[1] + 1)

    def _indices(self, height: int, width: int) -> tuple:
        key = (height, width)
        if key not in self._index_cache:
            kh, kw = self.kernel
            out_h, out_w = self.output_size(height, width)
            ci, ki, kj = np.meshgrid(np.arange(self.in_channels), np.arange(kh), np.arange(kw),
                                     indexing="ij")
            ci, ki, kj = ci.ravel(), ki.ravel(), kj.ravel()
            rows = np.arange(out_h)[:, None] * self.stride[0] + ki[None, :]
            cols = np.arange(out_w)[:, None] * self.stride[1] + kj[None, :]
            self._index_cache[key] = (ci[None, None, :], rows[:, None, :], cols[None, :, :])
        return self._index_cache[key]

    def __call__(self, x: DiffTensor) -> DiffTensor:
        channels, height, width = x.shape
        if height < self.kernel[0] or width < self.kernel[1]:
            raise SeparatorError(f"Conv2d input {x.shape} smaller than kernel {self.kernel}")
        out_h, out_w = self.output_size(height, width)
        patches = ad.getitem(x, self._indices(height, width))
        flat = patches.reshape(out_h * out_w, -1) @ self.weight + self.bias
        return ad.transpose(flat.reshape(out_h, out_w, -1), (2, 0, 1))


def log_magnitude(x: DiffTensor, floor: float = LOG_FLOOR) -> DiffTensor:
    """``log|x|`` with a power floor, differentiable in ``x``."""
    return 0.5 * ad.log(ad.abs2(x) + floor)


class MaskEstimator(Module):
    """Context-windowed per-frame MLP producing per-bin source masks.

    Features are the channel-averaged log-magnitude of the mixture, stacked over
    ``±context`` frames. The head is a softmax across the ``n_sources`` masks
    of each time-frequency bin.
    """

    def __init__(self, n_freq: int = 257, n_sources: int = 2, hidden: Sequence[int] = (256,),
                 context: int = 3, seed: int = 0):
        self.n_freq = n_freq
        self.n_sources = n_sources
        self.hidden = tuple(int(h) for h in hidden)
        self.context = context
        self.seed = seed
        rng = rng_for(seed, "mask-estimator")
        sizes = [(2 * context + 1) * n_freq, *self.hidden]
        self.layers = [Linear(n_in, n_out, rng) for n_in, n_out in zip(sizes[:-1], sizes[1:])]
        self.head = Linear(sizes[-1], n_sources * n_freq, rng)

    def spec(self) -> dict:
        return {"n_freq": self.n_freq, "n_sources": self.n_sources,
                "hidden": list(self.hidden), "context": self.context, "seed": self.seed}

    @classmethod
    def from_spec(cls, spec: Mapping) -> "MaskEstimator":
        return cls(n_freq=spec["n_freq"], n_sources=spec["n_sources"], hidden=spec["hidden"],
                   context=spec["context"], seed=spec.get("seed", 0))

    def named_children(self):
        children = {f"hidden{i}": layer for i, layer in enumerate(self.layers)}
        children["head"] = self.head
        return children

    def features(self, x: DiffTensor) -> DiffTensor:
        """(frames, (2·context+1)·n_freq) context-stacked log-magnitude features."""
        power = ad.mean(ad.abs2(x), axis=0)
        feats = 0.5 * ad.log(power + LOG_FLOOR)
        n_frames = feats.shape[1]
        offsets = np.arange(-self.context, self.context + 1)
        index = np.clip(np.arange(n_frames)[:, None] + offsets[None, :], 0, n_frames - 1)
        stacked = ad.transpose(feats[:, index], (1, 2, 0))
        return stacked.reshape(n_frames, -1)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        """Masks shaped (source, freq, frame) for a mixture shaped (mic, freq, frame)."""
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.n_freq:
            raise SeparatorError(
                f"Mask estimator expects (mic, {self.n_freq}, frame) input, got {x.shape}"
            )
        h = self.features(x)
        for layer in self.layers:
            h = ad.relu(layer(h))
        logits = self.head(h).reshape(x.shape[2], self.n_sources, self.n_freq)
        masks = ad.softmax(logits, axis=1)
        return ad.transpose(masks, (1, 2, 0))


class Discriminator(Module):
    """Strided conv stack over a log-magnitude spectrogram, pooled to one probability."""

    def __init__(self, channels: Sequence[int] = (8, 16), kernel: Tuple[int, int] = (3, 3),
                 stride: Tuple[int, int] = (2, 2), seed: int = 0):
        self.channels = tuple(int(c) for c in channels)
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.seed = seed
        rng = rng_for(seed, "discriminator")
        sizes = [1, *self.channels]
        self.convs = [Conv2d(c_in, c_out, self.kernel, self.stride, rng)
                      for c_in, c_out in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(sizes[-1], 1, rng)

    def spec(self) -> dict:
        return {"channels": list(self.channels), "kernel": list(self.kernel),
                "stride": list(self.stride), "seed": self.seed}

    @classmethod
    def from_spec(cls, spec: Mapping) -> "Discriminator":
        return cls(channels=spec["channels"], kernel=tuple(spec["kernel"]),
                   stride=tuple(spec["stride"]), seed=spec.get("seed", 0))

    def named_children(self):
        children = {f"conv{i}": conv for i, conv in enumerate(self.convs)}
        children["out"] = self.out
        return children

    def __call__(self, x: DiffTensor) -> DiffTensor:
        """Probability that the single-channel spectrogram ``x`` (freq, frame) is clean speech."""
        x = ad.as_tensor(x)
        if x.ndim == 3:
            x = x[0]
        h = ad.expand_dims(log_magnitude(x), 0)
        for conv in self.convs:
            h = ad.leaky_relu(conv(h))
        pooled = ad.mean(h, axis=(1, 2)).reshape(1, -1)
        return ad.sigmoid(self.out(pooled)).reshape(())


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam over a named parameter map."""

    def __init__(self, params: Mapping[str, DiffTensor], learning_rate: float = 5e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(learning_rate=learning_rate, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.value)
            self.state.v[name] = np.zeros(p.shape)

    def step(self, grads: Mapping[str, np.ndarray]) -> bool:
        """Apply one update; returns False (and leaves parameters alone) on non-finite gradients."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                self.state.skipped += 1
                logger.warning(f"Skipping Adam step {self.state.step + 1}: non-finite gradient for {name}")
                return False
        s = self.state
        s.step += 1
        correction1 = 1.0 - s.beta1 ** s.step
        correction2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            s.m[name] = s.beta1 * s.m[name] + (1.0 - s.beta1) * g
            s.v[name] = s.beta2 * s.v[name] + (1.0 - s.beta2) * np.abs(g) ** 2
            m_hat = s.m[name] / correction1
            v_hat = s.v[name] / correction2
            p.value -= s.learning_rate * m_hat / (np.sqrt(v_hat) + s.eps)
        return True

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {"step": np.array(self.state.step), "skipped": np.array(self.state.skipped)}
        for name in self.params:
            out[f"m/{name}"] = self.state.m[name].copy()
            out[f"v/{name}"] = self.state.v[name].copy()
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.state.step = int(state["step"])
        self.state.skipped = int(state["skipped"])
        for name in self.params:
            self.state.m[name] = np.array(state[f"m/{name}"])
            self.state.v[name] = np.array(state[f"v/{name}"])


def _write_member(zf: zipfile.ZipFile, name: str, array: np.ndarray) -> None:
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, np.ascontiguousarray(array), allow_pickle=False)
    info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, buffer.getvalue())


def save_checkpoint(path: Union[str, Path], arrays: Mapping[str, np.ndarray], meta: Mapping) -> Path:
    """Write named arrays plus JSON metadata as a byte-reproducible ``.npz`` archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"format": CHECKPOINT_FORMAT, **meta}, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "__meta__", np.frombuffer(header, dtype=np.uint8))
        for name in sorted(arrays):
            _write_member(zf, name, np.asarray(arrays[name]))
    tmp.replace(path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e
    if "__meta__" not in arrays:
        raise CheckpointError(f"Checkpoint {path} has no metadata")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format {meta.get('format')!r} in {path}")
    return arrays, meta


def prefixed(state: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{name}": value for name, value in state.items()}


def unprefixed(arrays: Mapping[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    head = f"{prefix}/"
    return {name[len(head):]: value for name, value in arrays.items() if name.startswith(head)}


def parameter_hash(state: Mapping[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(state):
        value = np.ascontiguousarray(state[name])
        digest.update(name.encode("utf-8"))
        digest.update(str(value.dtype).encode("utf-8"))
        digest.update(str(value.shape).encode("utf-8"))
        digest.update(value.tobytes())
    return digest.hexdigest()


def load_mask_estimator(path: Union[str, Path]) -> Tuple[MaskEstimator, dict]:
    """Rebuild the mask estimator stored in a training checkpoint."""
    arrays, meta = load_checkpoint(path)
    if "estimator" not in meta:
        raise CheckpointError(f"Checkpoint {path} holds no mask estimator")
    estimator = MaskEstimator.from_spec(meta["estimator"])
    estimator.load_state_dict(unprefixed(arrays, "estimator"))
    return estimator, meta
