"""The inversion loop: Gaussian init, Adam on the pixels, loss tracing,
checkpoints, export and multi-seed orchestration."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .modelzoo import EOS, ModelSuite, PromptSpec, decode_images
from .objective import TERMS, ObjectiveOptions, ObjectiveWeights, ReferenceStats, TargetSpec, total_objective

log = logging.getLogger(__name__)

GENERATOR = "numpy.random.PCG64/standard_normal/v1"


class NumericAbort(RuntimeError):
    """Raised when the loss or gradient goes non-finite; carries the partial run."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class InversionConfig:
    mode: str = "vlm"
    iterations: int | None = None       # 5000 vlm / 3000 vit
    batch_size: int | None = None       # 1 vlm / 32 vit
    lr: float | None = None             # 0.05 vlm / 0.01 vit
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str | None = None         # constant vlm / cosine vit
    lr_min: float = 0.0
    seeds: tuple[int, ...] = (0, 1, 2)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    prompt: PromptSpec | None = None
    target: TargetSpec | None = None
    layers: tuple[int, ...] | None = None
    checkpoint_every: int = 500
    log_every: int = 10
    grad_clip: float | None = None
    decode_max_len: int | None = None
    options: ObjectiveOptions = field(default_factory=ObjectiveOptions)
    dtype: str = "float32"

    def __post_init__(self):
        vlm = self.mode == "vlm"
        if self.mode not in ("vlm", "vit"):
            raise ValueError(f"mode must be 'vlm' or 'vit', got {self.mode!r}")
        defaults = {
            "iterations": 5000 if vlm else 3000,
            "batch_size": 1 if vlm else 32,
            "lr": 0.05 if vlm else 0.01,
            "schedule": "constant" if vlm else "cosine",
        }
        for name, value in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.lr_min <= self.lr:
            raise ValueError("lr_min must lie in [0, lr]")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two numbers in [0, 1)")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ValueError("log_every must be >= 1 and checkpoint_every >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.target is not None and self.target.mode != self.mode:
            raise ValueError(f"target mode {self.target.mode!r} differs from run mode {self.mode!r}")
        if vlm and self.target is not None and self.prompt is None:
            object.__setattr__(self, "prompt", PromptSpec(self.target.target_text or "red"))

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def echo(self) -> dict:
        return asdict(self)


@dataclass
class RunState:
    image: torch.Tensor
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def start(cls, image):
        return cls(image, torch.zeros_like(image), torch.zeros_like(image), 0)


@dataclass
class TraceEntry:
    step: int
    losses: dict
    lr: float


@dataclass
class RunResult:
    final_image: torch.Tensor
    checkpoints: dict
    trace: list
    config: dict
    seed: int
    wall_time: float
    status: str = "ok"
    decoded: list = field(default_factory=list)


def init_image(seed: int, shape) -> torch.Tensor:
    """i.i.d. N(0, 1) pixels from PCG64, deterministic per (seed, shape)."""
    rng = np.random.Generator(np.random.PCG64(int(seed)))
    return torch.from_numpy(rng.standard_normal(tuple(shape)))


def cosine_lr(step, total_steps, lr_max, lr_min=0.0):
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(state: RunState, grad, lr, b1=0.9, b2=0.999, eps=1e-8) -> RunState:
    """One bias-corrected Adam update; returns a new state."""
    if grad.shape != state.image.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} does not match image {tuple(state.image.shape)}")
    if not bool(torch.isfinite(grad).all()):
        raise NumericAbort(f"non-finite gradient at step {state.step}")
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    image = state.image - lr * m_hat / (v_hat.sqrt() + eps)
    return RunState(image, m, v, t)


def _lr_at(config: InversionConfig, step):
    if config.schedule == "cosine":
        return cosine_lr(step, config.iterations, config.lr, config.lr_min)
    return config.lr


def run_inversion(config: InversionConfig, suite: ModelSuite, ref_stats: ReferenceStats | None,
                  seed: int | None = None, on_log=None) -> RunResult:
    """Optimize the pixels of a fresh Gaussian image against the objective.

    Only the image is updated. ``on_log(entry)`` is called at every logged
    step. Raises ``NumericAbort`` (with the partial result attached) on a
    non-finite loss or gradient.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    if config.target is None:
        raise ValueError("config has no target")
    dtype = config.torch_dtype
    if suite.dtype != dtype:
        suite = suite.to(dtype)
    target = config.target
    if target.mode == "vlm" and not target.target_token_ids:
        target = TargetSpec("vlm", target.target_text, target.token_ids(suite), target.class_label,
                            target.base_variant)
    shape = (config.batch_size, *suite.input_shape)
    state = RunState.start(init_image(seed, shape).to(dtype))
    trace, checkpoints = [], {}
    last_good = state.image.clone()
    t0 = time.perf_counter()

    def partial(status):
        return RunResult(last_good.float(), dict(checkpoints), list(trace), config.echo(), seed,
                         time.perf_counter() - t0, status)

    for i in range(config.iterations):
        lr = _lr_at(config, i)
        x = state.image.detach().clone().requires_grad_(True)
        parts = total_objective(suite, x, config.prompt, target, ref_stats, config.weights, config.options)
        if not bool(torch.isfinite(parts.total)):
            raise NumericAbort(f"non-finite loss at step {i}", partial("aborted"))
        (grad,) = torch.autograd.grad(parts.total, x)
        if i % config.log_every == 0:
            entry = TraceEntry(i, parts.floats(), lr)
            trace.append(entry)
            if on_log is not None:
                on_log(entry)
        if config.grad_clip is not None:
            norm = grad.norm()
            if norm > config.grad_clip:
                grad = grad * (config.grad_clip / norm)
        try:
            state = adam_step(state, grad.detach(), lr, *config.betas, config.eps)
        except NumericAbort as e:
            raise NumericAbort(str(e), partial("aborted")) from None
        last_good = state.image.detach().clone()
        if config.checkpoint_every and state.step % config.checkpoint_every == 0:
            checkpoints[state.step] = last_good.float()

    result = RunResult(state.image.detach().float(), checkpoints, trace, config.echo(), seed,
                       time.perf_counter() - t0)
    if target.mode == "vlm":
        max_len = config.decode_max_len or len(target.token_ids(suite)) + 2
        result.decoded = decode_images(suite, config.prompt, state.image.detach(), max_len)
    return result


def _serial_run(args):
    config, suite, ref_stats, seed = args
    torch.set_num_threads(1)
    return run_inversion(config, suite, ref_stats, seed)


def run_multi_seed(config: InversionConfig, suite: ModelSuite, ref_stats, workers: int = 1) -> list[RunResult]:
    """One independent run per seed, returned in seed order."""
    jobs = [(config, suite, ref_stats, s) for s in config.seeds]
    if workers <= 1:
        return [run_inversion(config, suite, ref_stats, s) for s in config.seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_serial_run, jobs))


# ---------------------------------------------------------------------------
# export


@dataclass
class ExportImage:
    pixels: np.ndarray       # H × W × C uint8
    source: torch.Tensor     # original float image


def postprocess_image(image) -> ExportImage:
    """Per-channel min-max rescale to [0, 1] and 8-bit quantization.

    A constant channel maps to 0.5.
    """
    x = image.detach().double().cpu()
    if x.dim() != 3:
        raise ValueError("postprocess_image takes one C×H×W image")
    if not bool(torch.isfinite(x).all()):
        raise ValueError("image has non-finite values")
    lo = x.amin(dim=(1, 2), keepdim=True)
    hi = x.amax(dim=(1, 2), keepdim=True)
    span = hi - lo
    scaled = torch.where(span > 0, (x - lo) / torch.where(span > 0, span, 1.0), torch.full_like(x, 0.5))
    pixels = np.floor(scaled.numpy() * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    return ExportImage(pixels, image.detach().clone())


def tile(images) -> np.ndarray:
    """Export a B×C×H×W batch as one horizontal strip."""
    return np.concatenate([postprocess_image(im).pixels for im in images], axis=1)


def _png(array, path):
    from PIL import Image

    Image.fromarray(array).save(path, optimize=False)


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_run(result: RunResult, run_dir, extra_manifest: dict | None = None) -> Path:
    """Write the run directory: manifest, trace, checkpoint and final images."""
    run_dir = Path(run_dir)
    (run_dir / "images").mkdir(parents=True, exist_ok=True)
    with open(run_dir / "trace.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", *TERMS, "lr"])
        for e in result.trace:
            w.writerow([e.step, *(repr(e.losses[k]) for k in TERMS), repr(e.lr)])
    for step, img in sorted(result.checkpoints.items()):
        _png(tile(img), run_dir / "images" / f"step_{step:06d}.png")
    _png(tile(result.final_image), run_dir / "final.png")
    final = np.ascontiguousarray(result.final_image.numpy(), dtype="<f4")
    (run_dir / "final.f32").write_bytes(final.tobytes())
    manifest = {
        "code_version": __version__,
        "config": result.config,
        "seed": result.seed,
        "status": result.status,
        "final_shape": list(final.shape),
        "final_sha256": file_sha256(run_dir / "final.f32"),
        "init_generator": GENERATOR,
        "decoded": result.decoded,
        "trace_length": len(result.trace),
        "wall_time": result.wall_time,
    }
    manifest.update(extra_manifest or {})
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return run_dir


def load_final_image(run_dir) -> torch.Tensor:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    raw = np.frombuffer((run_dir / "final.f32").read_bytes(), dtype="<f4")
    return torch.from_numpy(raw.reshape(manifest["final_shape"]).copy())
