"""Single forward-backward training loop for student, EMA teacher and augmentation policy."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .augment import build_operation_set, dump_operation_set
from .config import RunConfig, from_dict, to_dict, with_overrides, write_effective_config
from .data import load_splits
from .evaluate import extract_embeddings, knn_sweep, write_report
from .optim import Adam, clip_grad_norm, cosine, cosine_with_warmup, decay_mask, step_decay
from .policy import PolicyParams, Views, apply_crops, generate_views, randaug_pool, sample_crops, _apply_layer
from .ssl import DistillState, build_network, ema_update, make_teacher, total_loss, update_center

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


# ---------------------------------------------------------------------------
# progressive image-size schedule

@dataclass
class StageSchedule:
    num_stages: int = 4
    min_size: int = 16
    max_size: int = 32
    patch_size: int = 4

    def sizes(self) -> List[int]:
        if self.num_stages <= 1:
            return [round_to_patch(self.max_size, self.patch_size)]
        span = self.max_size - self.min_size
        return [round_to_patch(self.min_size + span * k / (self.num_stages - 1), self.patch_size)
                for k in range(self.num_stages)]


def round_to_patch(x: float, patch: int) -> int:
    """Nearest multiple of ``patch``; exact ties round up."""
    return int(math.floor(x / patch + 0.5)) * patch


def stage_index(step: int, total_steps: int, num_stages: int) -> int:
    if num_stages <= 1:
        return 0
    return min(num_stages - 1, step * num_stages // max(1, total_steps))


def stage_size(step: int, total_steps: int, schedule: StageSchedule) -> int:
    return schedule.sizes()[stage_index(step, total_steps, schedule.num_stages)]


# ---------------------------------------------------------------------------
# trainer

def _network_kwargs(cfg: RunConfig) -> dict:
    e, h = cfg.encoder, cfg.head
    return dict(patch_size=e.patch_size, depth=e.depth, width=e.width, heads=e.heads,
                mlp_hidden=e.mlp_hidden, mlp_input_size=e.mlp_input_size, mlp_width=e.mlp_width,
                mlp_layers=e.mlp_layers, head_hidden=h.hidden, bottleneck=h.bottleneck,
                out_dim=h.out_dim)


class Trainer:
    """Holds the full training state; ``step()`` advances it by one optimizer step."""

    def __init__(self, cfg: RunConfig, train_set=None, test_set=None):
        self.cfg = cfg
        self.dtype = np.float64 if cfg.precision == "float64" else np.float32
        if train_set is None:
            train_set, test_set = load_splits(cfg.dataset)
        self.train_set, self.test_set = train_set, test_set
        p = cfg.policy
        self.ops = build_operation_set(p.levels, p.magnitudes, p.kinds, p.include_geometric, p.ops)
        with T.precision(self.dtype):
            kw = _network_kwargs(cfg)
            self._builder = lambda: build_network(cfg.encoder.arch, np.random.default_rng([cfg.seed, 1]), **kw)
            self.student = self._builder()
            self.teacher = make_teacher(self.student, self._builder)
            n_gates = max(1, p.num_layers - 1) if p.hierarchical else 1
            count = 1 if p.shared else 2
            self.policies = [PolicyParams.init(len(self.ops), n_gates, p.p_init, p.lambda_cat,
                                               p.lambda_bern, p.gumbel) for _ in range(count)]
        for pol in self.policies:
            pol.pi.requires_grad = p.search_weights and cfg.augment.mode == "autoview"
            pol.p_logit.requires_grad = p.search_prob and cfg.augment.mode == "autoview"
        self.state = DistillState.zeros(cfg.head.out_dim, center_momentum=cfg.distill.center_momentum,
                                        teacher_temp=cfg.distill.teacher_temp,
                                        student_temp=cfg.distill.student_temp,
                                        ema_momentum=cfg.distill.ema_momentum)
        s_params = self.student.parameters()
        self.student_opt = Adam(s_params, cfg.student_optim.betas, decay_mask=decay_mask(s_params))
        self.pi_opt = Adam([pol.pi for pol in self.policies], cfg.policy_pi_optim.betas)
        self.p_opt = Adam([pol.p_logit for pol in self.policies], cfg.policy_p_optim.betas)
        self.step_index = 0
        self.schedule = StageSchedule(cfg.progressive.num_stages, cfg.progressive.min_size,
                                      cfg.progressive.max_size, cfg.encoder.patch_size)

    # -- schedules ---------------------------------------------------------
    def image_size(self, step: int) -> int:
        if self.cfg.progressive.enabled:
            return stage_size(step, self.cfg.steps, self.schedule)
        return self.cfg.dataset.image_size

    def rates(self, step: int) -> dict:
        c, so = self.cfg, self.cfg.student_optim
        warm = int(round(so.warmup_fraction * c.steps))
        return {
            "lr": cosine_with_warmup(step, c.steps, so.base_lr, so.min_lr, warm),
            "weight_decay": cosine(step, c.steps, so.weight_decay_start, so.weight_decay_end),
            "lr_pi": step_decay(step, c.steps, c.policy_pi_optim.lr, c.policy_pi_optim.decay_milestones,
                                c.policy_pi_optim.decay_factor),
            "lr_p": step_decay(step, c.steps, c.policy_p_optim.lr, c.policy_p_optim.decay_milestones,
                               c.policy_p_optim.decay_factor),
        }

    def batch_indices(self, step: int) -> np.ndarray:
        """Epoch-wise shuffled order fixed by the seed, independent of any prefetching."""
        n, bs = len(self.train_set), self.cfg.batch_size
        pos = np.arange(step * bs, (step + 1) * bs)
        epochs, offsets = pos // n, pos % n
        out = np.empty(bs, dtype=np.int64)
        for e in np.unique(epochs):
            perm = np.random.default_rng([self.cfg.seed, 7, int(e)]).permutation(n)
            sel = epochs == e
            out[sel] = perm[offsets[sel]]
        return out

    # -- views -------------------------------------------------------------
    def make_views(self, x: np.ndarray, rng: np.random.Generator, size: int) -> Views:
        c = self.cfg
        scale = tuple(c.augment.crop_scale)
        if c.augment.mode == "autoview":
            params = self.policies[0] if len(self.policies) == 1 else tuple(self.policies)
            return generate_views(x, params, self.ops, rng, size, c.policy.num_layers,
                                  c.policy.hierarchical, scale, c.augment.flip)
        streams = rng.spawn(2)
        outs, cleans = [], []
        n_ops = c.augment.randaug_n if c.augment.mode == "randaug" else 0
        pool = np.asarray(randaug_pool(self.ops, c.augment.randaug_m))
        for s in streams:
            crops = sample_crops(s, len(x), x.shape[-1], scale, flip=c.augment.flip)
            y = T.Tensor(apply_crops(x, crops, size), dtype=self.dtype)
            cleans.append(y)
            for _ in range(n_ops):
                idx = pool[s.integers(0, len(pool), size=len(x))]
                y = T.Tensor(_apply_layer(y, self.ops, idx).data)
            outs.append(y)
        return Views(outs[0], outs[1], cleans[0], cleans[1], ())

    # -- one step ----------------------------------------------------------
    def step(self) -> dict:
        c = self.cfg
        step = self.step_index
        with T.precision(self.dtype):
            size = self.image_size(step)
            idx = self.batch_indices(step)
            x = self.train_set.images[idx].astype(self.dtype)
            rng = np.random.default_rng([c.seed, 11, step])
            views = self.make_views(x, rng, size)
            alpha = c.alpha if c.augment.mode == "autoview" else 0.0
            terms = total_loss(views, self.student, self.teacher, self.state, alpha, c.symmetrize)
            loss_value = terms.loss.item()
            if not math.isfinite(loss_value):
                raise TrainingAborted(step, f"non-finite loss {loss_value}")
            self.student.zero_grad()
            for pol in self.policies:
                pol.pi.grad = None
                pol.p_logit.grad = None
            terms.loss.backward()
            if any(p.grad is not None for p in self.teacher.parameters()):
                raise TrainingAborted(step, "teacher parameter received a gradient")
            r = self.rates(step)
            grad_norm = clip_grad_norm(self.student.parameters(), c.student_optim.clip_grad)
            self.student_opt.step(r["lr"], r["weight_decay"])
            self.pi_opt.step(r["lr_pi"])
            self.p_opt.step(r["lr_p"])
            ema_update(self.teacher, self.student, c.distill.ema_momentum)
            update_center(self.state, terms.teacher_logits)
        self.step_index += 1
        record = {"step": step, "loss": loss_value, "h_main": terms.h_main,
                  "h_reg": None if math.isnan(terms.h_reg) else terms.h_reg,
                  "grad_norm": grad_norm, "image_size": size, **r,
                  "exec_prob": [float(v) for v in self.policies[0].exec_probs()]}
        return record

    # -- checkpointing -----------------------------------------------------
    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, arr in self.student.state_dict().items():
            arrays[f"student.{name}"] = arr
        for name, arr in self.teacher.state_dict().items():
            arrays[f"teacher.{name}"] = arr
        for i, pol in enumerate(self.policies):
            arrays[f"policy{i}.pi"] = pol.pi.data.copy()
            arrays[f"policy{i}.p_logit"] = pol.p_logit.data.copy()
        arrays["distill.center"] = self.state.center.copy()
        arrays.update(self.student_opt.state_dict("optim.student"))
        arrays.update(self.pi_opt.state_dict("optim.pi"))
        arrays.update(self.p_opt.state_dict("optim.p"))
        return arrays

    def save_checkpoint(self, path) -> Path:
        meta = {"step": self.step_index, "config": to_dict(self.cfg),
                "rng": {"seed": self.cfg.seed, "next_step": self.step_index},
                "ops": [op.describe() for op in self.ops]}
        return ckpt.save(path, self.state_arrays(), meta)

    def load_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        self.student.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("student.")})
        self.teacher.load_state_dict({k[8:]: v for k, v in arrays.items() if k.startswith("teacher.")})
        for i, pol in enumerate(self.policies):
            pol.pi.data = arrays[f"policy{i}.pi"].copy()
            pol.p_logit.data = arrays[f"policy{i}.p_logit"].copy()
        self.state.center = arrays["distill.center"].copy()
        self.student_opt.load_state_dict(arrays, "optim.student")
        self.pi_opt.load_state_dict(arrays, "optim.pi")
        self.p_opt.load_state_dict(arrays, "optim.p")
        self.step_index = step

    @classmethod
    def from_checkpoint(cls, path, cfg: Optional[RunConfig] = None, **kw) -> "Trainer":
        arrays, meta = ckpt.load(path)
        if cfg is None:
            cfg = from_dict(meta["config"])
        trainer = cls(cfg, **kw)
        trainer.load_arrays(arrays, int(meta["step"]))
        return trainer

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, linear: bool = False) -> dict:
        c = self.cfg
        size = self.image_size(max(0, c.steps - 1))
        with T.precision(self.dtype):
            train_bank = extract_embeddings(self.teacher, self.train_set.images, self.train_set.labels,
                                            size, self.train_set.num_classes, c.eval.crop_ratio)
            test_bank = extract_embeddings(self.teacher, self.test_set.images, self.test_set.labels,
                                           size, self.test_set.num_classes, c.eval.crop_ratio)
        report = {"step": self.step_index, "knn": knn_sweep(train_bank, test_bank, c.eval.k_values,
                                                           c.eval.temperature)}
        if linear:
            from .evaluate import linear_probe
            report["linear"] = linear_probe(train_bank, test_bank)
        return report

    def policy_probs(self) -> np.ndarray:
        return self.policies[0].probs()


# ---------------------------------------------------------------------------
# run driver

class RunWriter:
    """Metrics JSONL plus policy-trajectory CSV under an output directory."""

    def __init__(self, out_dir, op_names: Sequence[str], append: bool = False):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        mode = "a" if append else "w"
        self.metrics = open(self.out / "metrics.jsonl", mode)
        traj_path = self.out / "policy_trajectory.csv"
        fresh = not (append and traj_path.exists())
        self.traj_file = open(traj_path, mode, newline="")
        self.traj = csv.writer(self.traj_file)
        if fresh:
            self.traj.writerow(["step"] + list(op_names))

    def write(self, record: dict, probs: np.ndarray) -> None:
        self.metrics.write(json.dumps(record, sort_keys=True) + "\n")
        self.traj.writerow([record["step"]] + [repr(float(p)) for p in probs])
        self.metrics.flush()
        self.traj_file.flush()

    def close(self) -> None:
        self.metrics.close()
        self.traj_file.close()


def train(cfg: RunConfig, out_dir=None, resume=None, until: Optional[int] = None,
          trainer: Optional[Trainer] = None, write: bool = True) -> Trainer:
    """Run (or resume) training up to ``until`` steps (default: ``cfg.steps``)."""
    out_dir = Path(out_dir or cfg.out_dir)
    if trainer is None:
        trainer = Trainer.from_checkpoint(resume, cfg) if resume else Trainer(cfg)
    until = cfg.steps if until is None else min(until, cfg.steps)
    writer = None
    if write:
        write_effective_config(cfg, out_dir)
        (out_dir / "operations.txt").write_text(dump_operation_set(trainer.ops))
        writer = RunWriter(out_dir, [op.name for op in trainer.ops], append=bool(resume))
    try:
        while trainer.step_index < until:
            record = trainer.step()
            s = record["step"]
            if writer and (s % cfg.log_interval == 0 or s == cfg.steps - 1):
                writer.write(record, trainer.policy_probs())
            if write and cfg.checkpoint_interval and (s + 1) % cfg.checkpoint_interval == 0:
                trainer.save_checkpoint(out_dir / f"checkpoint_step{s + 1}.bin")
        if write:
            trainer.save_checkpoint(out_dir / CHECKPOINT_NAME)
    finally:
        if writer:
            writer.close()
    return trainer


def run_and_evaluate(cfg: RunConfig, name: str, out_dir, train_set=None, test_set=None,
                     write: bool = True) -> dict:
    """Train one configuration from scratch and return its evaluation report."""
    out_dir = Path(out_dir)
    trainer = Trainer(cfg, train_set, test_set)
    start = time.perf_counter()
    train(cfg, out_dir, trainer=trainer, write=write)
    report = trainer.evaluate()
    report.update({
        "name": name,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "wall_seconds": time.perf_counter() - start,
        "policy_probs": trainer.policy_probs().tolist(),
        "exec_prob": trainer.policies[0].exec_probs().tolist(),
        "ops": [op.name for op in trainer.ops],
    })
    if write:
        write_report(out_dir / "eval.json", report)
    return report


# ---------------------------------------------------------------------------
# experiments

LEVEL_NAMES = {"low": 0, "mid": 1, "high": 2}


def randaug_grid_baseline(cfg: RunConfig, ns: Sequence[int] = (1, 2), ms: Sequence = ("low", "mid", "high"),
                          out_dir=None, seeds: Optional[Sequence[int]] = None, write: bool = True) -> List[dict]:
    """One run per (N, M[, seed]) with uniform op sampling at a fixed magnitude bin."""
    out_dir = Path(out_dir or cfg.out_dir)
    seeds = [cfg.seed] if seeds is None else list(seeds)
    train_set, test_set = load_splits(cfg.dataset)
    rows = []
    for n in ns:
        for m in ms:
            level = LEVEL_NAMES.get(m, m) if isinstance(m, str) else int(m)
            for seed in seeds:
                mode = "randaug" if n > 0 else "none"
                run_cfg = with_overrides(cfg, {"augment.mode": mode, "augment.randaug_n": int(n),
                                               "augment.randaug_m": int(level), "seed": int(seed)})
                name = f"randaug_N{n}_M{m}_s{seed}"
                rep = run_and_evaluate(run_cfg, name, out_dir / name, train_set, test_set, write)
                rows.append({"N": int(n), "M": m, "seed": int(seed), "knn_best": rep["knn"]["best"],
                             "best_k": rep["knn"]["best_k"], **{f"knn@{k}": v for k, v in rep["knn"]["per_k"].items()}})
    return rows


ABLATIONS: Dict[str, dict] = {
    "no-hierarchical": {"policy.hierarchical": False},
    "fixed-exec-prob": {"policy.search_prob": False},
    "uniform-weights": {"policy.search_weights": False},
    "no-regularizer": {"alpha": 0.0},
    "k3": {"policy.num_layers": 3},
    "unshared-g": {"policy.shared": False},
}


def run_ablations(cfg: RunConfig, names: Sequence[str], out_dir=None, include_full: bool = True,
                  write: bool = True) -> List[dict]:
    out_dir = Path(out_dir or cfg.out_dir)
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise KeyError(f"unknown ablation switch: {unknown[0]}")
    train_set, test_set = load_splits(cfg.dataset)
    todo = ([("full", {})] if include_full else []) + [(n, ABLATIONS[n]) for n in names]
    rows = []
    for name, overrides in todo:
        run_cfg = with_overrides(cfg, {"augment.mode": "autoview", **overrides})
        rep = run_and_evaluate(run_cfg, name, out_dir / name, train_set, test_set, write)
        rows.append({"setting": name, "knn_best": rep["knn"]["best"], "best_k": rep["knn"]["best_k"],
                     **{f"knn@{k}": v for k, v in rep["knn"]["per_k"].items()},
                     "exec_prob": rep["exec_prob"][0], "max_op_prob": max(rep["policy_probs"])})
    return rows


ALPHA_GRID = (0.0, 0.3, 0.5, 0.8, 1.0, 3.0)


def alpha_sweep(cfg: RunConfig, alphas: Sequence[float] = ALPHA_GRID, out_dir=None,
                write: bool = True) -> List[dict]:
    """Regularizer-weight trade-off: one AutoView run per alpha, same seed and data."""
    out_dir = Path(out_dir or cfg.out_dir)
    train_set, test_set = load_splits(cfg.dataset)
    rows = []
    for a in alphas:
        run_cfg = with_overrides(cfg, {"augment.mode": "autoview", "alpha": float(a)})
        rep = run_and_evaluate(run_cfg, f"alpha{a:g}", out_dir / f"alpha{a:g}", train_set, test_set, write)
        rows.append({"alpha": float(a), "knn_best": rep["knn"]["best"], "best_k": rep["knn"]["best_k"],
                     **{f"knn@{k}": v for k, v in rep["knn"]["per_k"].items()},
                     "exec_prob": rep["exec_prob"][0], "max_op_prob": max(rep["policy_probs"])})
    return rows


def time_steps(cfg: RunConfig, n_steps: int = 10, warmup: int = 2, frozen: bool = False,
               trainer: Optional[Trainer] = None) -> float:
    """Mean wall-clock seconds per training step (policy frozen: no policy gradients at all)."""
    if frozen:
        cfg = with_overrides(cfg, {"policy.search_weights": False, "policy.search_prob": False})
    trainer = trainer or Trainer(cfg)
    for _ in range(warmup):
        trainer.step()
    start = time.perf_counter()
    for _ in range(n_steps):
        trainer.step()
    return (time.perf_counter() - start) / n_steps
