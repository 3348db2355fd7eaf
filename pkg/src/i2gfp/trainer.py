"""Two-stage training driver, checkpoints and a finite-difference gradient auditor."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from .data_pipeline import MattingDataset
from .losses import ABS_OBSERVERS, LossBreakdown, NonFiniteLossError, matting_loss
from .matting_core import MattingSample, unknown_mask
from .metrics import MetricReport, evaluate
from .network import (
    ConfigError,
    MattingNet,
    ModelConfig,
    build_model,
    make_input,
    read_archive,
    validate_state,
    write_archive,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int = 200_000
    batch_size: int = 10
    lr_initial: float = 4e-4
    lr_min: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 10_000
    seed: int = 0
    resume_from: Optional[str] = None
    strict: bool = False

    def __post_init__(self):
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.iterations < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("iterations, batch_size and checkpoint_every must be positive")
        if not 0 <= self.lr_min <= self.lr_initial or self.lr_initial <= 0:
            raise ConfigError("need 0 <= lr_min <= lr_initial and lr_initial > 0")
        if not all(0 < b < 1 for b in self.adam_betas) or self.adam_eps <= 0:
            raise ConfigError("adam betas must lie in (0, 1) and adam_eps must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= cfg.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations}]")
    cos = math.cos(math.pi * iteration / cfg.iterations)
    return cfg.lr_min + (cfg.lr_initial - cfg.lr_min) * (1.0 + cos) / 2.0


def set_strict_mode(enabled: bool = True) -> None:
    """Single-threaded deterministic kernels, for bitwise-reproducible runs."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


# -- batches ---------------------------------------------------------------------

def collate(samples: Sequence[MattingSample], dtype=torch.float32) -> dict:
    def stack(key):
        return torch.from_numpy(np.stack([getattr(s, key) for s in samples])).to(dtype)

    batch = {
        "x": torch.stack([make_input(s.image, s.trimap) for s in samples]).to(dtype),
        "gt": stack("alpha")[:, None],
        "mask": torch.from_numpy(np.stack([unknown_mask(s.trimap) for s in samples]))[:, None],
        "image": stack("image").permute(0, 3, 1, 2),
        "fg": None,
        "bg": None,
    }
    if all(s.fg is not None and s.bg is not None for s in samples):
        batch["fg"] = stack("fg").permute(0, 3, 1, 2)
        batch["bg"] = stack("bg").permute(0, 3, 1, 2)
    return batch


def batch_loss(model: MattingNet, batch: dict):
    pred = model(batch["x"])
    return matting_loss(pred, batch["gt"], batch["mask"], batch["image"], batch["fg"], batch["bg"])


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict  # name -> float32 array
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    rng_state: Optional[dict] = None
    iteration: int = 0
    stage: int = 1

    def save(self, path) -> None:
        arrays = {}
        for prefix, d in (("param/", self.params), ("adam_m/", self.adam_m), ("adam_v/", self.adam_v)):
            arrays.update({prefix + k: np.asarray(v, dtype="<f4") for k, v in d.items()})
        meta = {"model": self.model_config.to_dict(), "train": self.train_config.to_dict(),
                "adam_step": self.adam_step, "rng_state": self.rng_state,
                "iteration": self.iteration, "stage": self.stage}
        write_archive(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = read_archive(path)

        def section(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        cfg = ModelConfig.from_dict(meta["model"])
        params = section("param/")
        validate_state(cfg, params)
        return cls(cfg, TrainConfig(**meta["train"]), params, section("adam_m/"), section("adam_v/"),
                   meta["adam_step"], meta["rng_state"], meta["iteration"], meta["stage"])

    def build_model(self) -> MattingNet:
        model = MattingNet(self.model_config)
        model.load_state_dict({k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in self.params.items()})
        return model


def warm_start(stage1: Checkpoint, cfg: ModelConfig) -> MattingNet:
    """Stage-2 model: fresh init, then every stage-1 tensor copied in.  The head's
    first convolution gains GFP input channels; its stage-1 slice is copied."""
    model = build_model(cfg)
    state = model.state_dict()
    for name, old in stage1.params.items():
        old = torch.from_numpy(np.array(old, dtype=np.float32))
        new = state[name]
        if new.shape == old.shape:
            new.copy_(old)
        elif new.dim() == 4 and new.shape[0] == old.shape[0] and new.shape[2:] == old.shape[2:]:
            new[:, : old.shape[1]].copy_(old)
        else:
            raise ConfigError(f"cannot warm-start {name}: {tuple(old.shape)} -> {tuple(new.shape)}")
    return model


# -- trainer -----------------------------------------------------------------------

class Trainer:
    """Single-writer optimisation loop over a :class:`MattingDataset`."""

    def __init__(self, model: MattingNet, cfg: TrainConfig, dataset: MattingDataset,
                 out_dir=None, val_samples: Sequence[MattingSample] = ()):
        self.model = model
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.val_samples = list(val_samples)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_initial, betas=cfg.adam_betas,
                                          eps=cfg.adam_eps, foreach=False)
        self.rng = np.random.default_rng(cfg.seed)
        self.iteration = 0
        self.history: list[LossBreakdown] = []
        self.checkpoints: list[Path] = []

    # state ---------------------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        names = dict(self.model.named_parameters())
        m, v, step = {}, {}, 0
        for name, p in names.items():
            st = self.optimizer.state.get(p)
            if st:
                m[name] = st["exp_avg"].detach().numpy().copy()
                v[name] = st["exp_avg_sq"].detach().numpy().copy()
                step = int(st["step"])
        params = {k: t.detach().numpy().copy() for k, t in self.model.state_dict().items()}
        return Checkpoint(self.model.cfg, self.cfg, params, m, v, step,
                          copy.deepcopy(self.rng.bit_generator.state), self.iteration, self.cfg.stage)

    def restore(self, ck: Checkpoint) -> None:
        """Resume optimiser, RNG and iteration counter from a same-stage checkpoint."""
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                p.copy_(torch.from_numpy(np.array(ck.params[name], dtype=np.float32)))
                if name in ck.adam_m:
                    self.optimizer.state[p] = {
                        "step": torch.tensor(float(ck.adam_step), dtype=torch.float32),
                        "exp_avg": torch.from_numpy(np.array(ck.adam_m[name], dtype=np.float32)),
                        "exp_avg_sq": torch.from_numpy(np.array(ck.adam_v[name], dtype=np.float32)),
                    }
        if ck.rng_state is not None:
            self.rng.bit_generator.state = copy.deepcopy(ck.rng_state)
        self.iteration = ck.iteration

    # loop ------------------------------------------------------------------------
    def next_batch(self) -> dict:
        n = len(self.dataset)
        if self.cfg.batch_size == n and self.dataset.aug is None:
            idx = np.arange(n)
        else:
            idx = self.rng.integers(n, size=self.cfg.batch_size)
        return collate([self.dataset.draw(int(i), self.rng) for i in idx])

    def train_step(self, batch: dict) -> LossBreakdown:
        lr = cosine_lr(self.iteration, self.cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total, parts = batch_loss(self.model, batch)
        total.backward()
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NonFiniteLossError(f"gradient of {name}", float("nan"))
        self.optimizer.step()
        self.iteration += 1
        self.history.append(parts)
        self._log({"iter": self.iteration, "lr": lr, "stage": self.cfg.stage, **parts.as_dict()})
        return parts

    def run(self, until: Optional[int] = None) -> Checkpoint:
        """Train up to ``until`` (default: ``cfg.iterations``), checkpointing on cadence and at the end."""
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        ck = None
        while self.iteration < until:
            self.train_step(self.next_batch())
            if self.iteration % self.cfg.checkpoint_every == 0 or self.iteration == self.cfg.iterations:
                ck = self._save()
        return ck if ck is not None else self.checkpoint()

    def _save(self) -> Checkpoint:
        ck = self.checkpoint()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / f"stage{self.cfg.stage}_iter{self.iteration:07d}.npz"
            ck.save(path)
            self.checkpoints.append(path)
            log.info("checkpoint %s", path)
            if self.val_samples:
                report = validate(self.model, self.val_samples)
                with open(self.out_dir / "val_log.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"iter": self.iteration, **report.aggregate}) + "\n")
        return ck

    def _log(self, record: dict) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "train_log.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_stage(stage: int, dataset: MattingDataset, model_cfg: ModelConfig, cfg: TrainConfig,
                out_dir=None, val_samples: Sequence[MattingSample] = ()) -> Trainer:
    """Build (or resume / warm-start) the stage's model and run it to completion.

    Stage 1 trains without the GFP branch.  Stage 2 needs ``cfg.resume_from``
    pointing at a stage-1 checkpoint (warm start) or a stage-2 one (resume).
    """
    cfg = replace(cfg, stage=stage)
    if cfg.strict:
        set_strict_mode(True)
    resume = Checkpoint.load(cfg.resume_from) if cfg.resume_from else None
    if stage == 2 and resume is None:
        raise ConfigError("stage 2 requires a stage-1 checkpoint (set resume_from)")

    if resume is not None and resume.stage == stage:
        trainer = Trainer(resume.build_model(), cfg, dataset, out_dir, val_samples)
        trainer.restore(resume)
    elif resume is not None and stage == 2 and resume.stage == 1:
        cfg2 = replace(resume.model_config, use_gfp=True, seed=model_cfg.seed,
                       gfp_channels=model_cfg.gfp_channels, gfp_kernels=model_cfg.gfp_kernels)
        trainer = Trainer(warm_start(resume, cfg2), cfg, dataset, out_dir, val_samples)
    elif resume is not None:
        raise ConfigError(f"cannot start stage {stage} from a stage-{resume.stage} checkpoint")
    else:
        if model_cfg.use_gfp:
            log.info("stage 1 trains without the GFP branch; use_gfp ignored")
        trainer = Trainer(build_model(replace(model_cfg, use_gfp=False)), cfg, dataset, out_dir, val_samples)
    trainer.run()
    return trainer


# -- inference ---------------------------------------------------------------------

@torch.no_grad()
def predict(model: MattingNet, image, trimap) -> np.ndarray:
    """Alpha for one sample already at the model's input size."""
    x = make_input(image, trimap)[None].to(next(model.parameters()).dtype)
    return model.eval()(x)[0, 0].float().numpy()


def validate(model: MattingNet, samples: Sequence[MattingSample]) -> MetricReport:
    triples = [(s.name or f"sample{i:04d}", predict(model, s.image, s.trimap), s.alpha, s.trimap)
               for i, s in enumerate(samples)]
    return evaluate(triples)


# -- gradient audit ------------------------------------------------------------------

@dataclass
class Probe:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale < 1e-12 else abs(self.analytic - self.numeric) / scale


@dataclass
class AuditReport:
    probes: list[Probe]
    eps: float
    skipped: list[tuple] = field(default_factory=list)  # (name, index) probes whose stencil crossed a kink

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)


_RELU_NAMES = {"relu", "relu_"}


class SwitchRecorder(TorchFunctionMode):
    """Records the branch taken at every non-smooth point of a forward pass:
    ReLU input signs, max-pool winners and the residual signs fed to ``smooth_abs``."""

    def __init__(self):
        super().__init__()
        self.pattern: list[torch.Tensor] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        name = getattr(func, "__name__", "")
        if name in _RELU_NAMES:
            self.pattern.append(args[0].detach() > 0)
        elif name == "max_pool2d" and not kwargs.get("return_indices"):
            kwargs = {k: v for k, v in kwargs.items() if k != "return_indices"}
            out, idx = F.max_pool2d_with_indices(*args, **kwargs)
            self.pattern.append(idx)
            return out
        return func(*args, **kwargs)

    def _observe(self, r):
        self.pattern.append(torch.sign(r.detach()))

    def __enter__(self):
        ABS_OBSERVERS.append(self._observe)
        return super().__enter__()

    def __exit__(self, *exc):
        ABS_OBSERVERS.remove(self._observe)
        return super().__exit__(*exc)


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def audit_gradients(module: torch.nn.Module, closure: Callable[[], torch.Tensor], n_probes: int = 20,
                    eps: float = 1e-3, seed: int = 0, probes: Optional[Sequence[tuple]] = None,
                    avoid_kinks: bool = True, max_draws: Optional[int] = None) -> AuditReport:
    """Compare autograd against central differences ``(f(w+eps) - f(w-eps)) / 2 eps``.

    Probes are scalar parameters ``(name, flat_index)``: given explicitly, or
    drawn at random (tensor uniformly, then an entry).  With ``avoid_kinks`` a
    random probe whose ``w +- eps`` evaluations take different branches at any
    ReLU, max-pool or absolute value is discarded and redrawn, because the
    difference quotient there measures a jump rather than the derivative.
    """
    params = dict(module.named_parameters())
    module.zero_grad(set_to_none=True)
    closure().backward()

    def evaluate(p, idx, value):
        p.view(-1)[idx] = value
        if not avoid_kinks:
            return float(closure()), None
        with SwitchRecorder() as rec:
            f = float(closure())
        return f, rec.pattern

    def measure(name, idx):
        p = params[name]
        analytic = 0.0 if p.grad is None else float(p.grad.view(-1)[idx])
        orig = p.view(-1)[idx].item()
        plus, pat_plus = evaluate(p, idx, orig + eps)
        minus, pat_minus = evaluate(p, idx, orig - eps)
        p.view(-1)[idx] = orig
        smooth = not avoid_kinks or _same_pattern(pat_plus, pat_minus)
        return Probe(name, idx, analytic, (plus - minus) / (2 * eps)), smooth

    results, skipped = [], []
    with torch.no_grad():
        if probes is not None:
            for name, idx in probes:
                results.append(measure(name, int(idx))[0])
            return AuditReport(results, eps)
        rng = np.random.default_rng(seed)
        names = sorted(params)
        max_draws = 50 * n_probes if max_draws is None else max_draws
        while len(results) < n_probes and len(results) + len(skipped) < max_draws:
            name = names[int(rng.integers(len(names)))]
            idx = int(rng.integers(params[name].numel()))
            probe, smooth = measure(name, idx)
            (results if smooth else skipped).append(probe if smooth else (name, idx))
    if len(results) < n_probes:
        log.warning("gradient audit found only %d kink-free probes in %d draws", len(results), max_draws)
    return AuditReport(results, eps, skipped)


def gradient_audit(model: MattingNet, sample: MattingSample, n_probes: int = 20, eps: float = 1e-3,
                   seed: int = 0, avoid_kinks: bool = True) -> AuditReport:
    """Audit the full training loss of ``model`` on one sample, in float64 on a copy."""
    model64 = copy.deepcopy(model).double()
    batch = collate([sample], dtype=torch.float64)
    return audit_gradients(model64, lambda: batch_loss(model64, batch)[0], n_probes, eps, seed,
                           avoid_kinks=avoid_kinks)
