"""Adversarial training loop with verification and similarity regularizers."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .data import FaceImage, stack
from .discriminator import PatchDiscriminator, build_discriminator
from .errors import MissingVerificator, NonFiniteLoss
from .generator import UNetGenerator, build_generator
from .ssim import sim_loss
from .verificator import LightCNN9, contrastive_loss, embed_batch

log = logging.getLogger(__name__)

EPS = 1e-12
HISTORY_FIELDS = ("step", "d_loss", "g_adv", "l_verif", "l_sim", "total")


def _log(p):
    return torch.log(torch.clamp(p, min=EPS))


def discriminator_loss(real_scores, fake_scores):
    """-mean log D(x) - mean log(1 - D(x_hat)), averaged over patches and batch."""
    return -_log(real_scores).mean() - _log(1.0 - fake_scores).mean()


def generator_adv_loss(fake_scores):
    """Non-saturating generator loss -mean log D(x_hat)."""
    return -_log(fake_scores).mean()


def adversarial_losses(D, x_batch, x_hat_batch):
    """(d_loss, g_adv) for one discriminator; ``D`` may be a module or a callable.

    d_loss sees x_hat detached; g_adv keeps the graph back to the generator.
    """
    real = D(x_batch)
    d_loss = discriminator_loss(real, D(x_hat_batch.detach()))
    g_adv = generator_adv_loss(D(x_hat_batch))
    for name, v in (("d_loss", d_loss), ("g_adv", g_adv)):
        if not torch.isfinite(v):
            raise NonFiniteLoss(name)
    return d_loss, g_adv


def generator_total_loss(g_adv, l_verif, l_sim, cfg: TrainConfig):
    lam1, lam2 = cfg.effective_lambdas
    parts = [g_adv]
    if lam1:
        parts.append(lam1 * l_verif)
    if lam2:
        parts.append(lam2 * l_sim)
    for p in parts:
        if not math.isfinite(float(p.detach() if isinstance(p, torch.Tensor) else p)):
            raise NonFiniteLoss("generator loss component is not finite")
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def verif_loss_term(verificator: LightCNN9, x_batch, x_hat_batch, alpha: float = 2.0):
    """Mean contrastive loss of (x, x_hat) treated as a negative pair.

    The original's embedding is a constant target; gradients reach x_hat only.
    """
    with torch.no_grad():
        e_x = embed_batch(verificator, x_batch)
    e_hat = embed_batch(verificator, x_hat_batch)
    eta = torch.ones(len(e_hat), dtype=e_hat.dtype)
    return contrastive_loss(e_x.to(e_hat.dtype), e_hat, eta, alpha).mean()


@dataclass
class TrainState:
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    verificator: LightCNN9 | None
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    config: TrainConfig
    step: int = 0
    history: list[dict] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig, verificator: LightCNN9 | None = None) -> TrainState:
    lam1, _ = cfg.effective_lambdas
    if lam1 and verificator is None:
        raise MissingVerificator(f"ablation {cfg.ablation} needs a pretrained verificator")
    if verificator is not None:
        verificator.freeze().eval()
    g = build_generator(cfg.seed, cfg.gen_width)
    d = build_discriminator(cfg.seed + 1, cfg.disc_width)
    g.train()
    d.train()
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr_system, betas=cfg.adam_betas, eps=cfg.adam_eps)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_system, betas=cfg.adam_betas, eps=cfg.adam_eps)
    return TrainState(g, d, verificator, opt_g, opt_d, cfg)


def step_rng(seed: int, step: int) -> torch.Generator:
    s = int(np.random.SeedSequence([seed, step, 0x9E37]).generate_state(1)[0])
    return torch.Generator().manual_seed(s)


def generator_losses(state: TrainState, x, x_hat) -> dict:
    """All generator-side terms for a fixed discriminator; gated terms are skipped."""
    cfg = state.config
    lam1, lam2 = cfg.effective_lambdas
    g_adv = generator_adv_loss(state.discriminator(x_hat))
    zero = torch.zeros((), dtype=x_hat.dtype)
    l_verif = verif_loss_term(state.verificator, x, x_hat, cfg.margin) if lam1 else zero
    l_sim = sim_loss(x, x_hat) if lam2 else zero
    total = generator_total_loss(g_adv, l_verif, l_sim, cfg)
    return {"g_adv": g_adv, "l_verif": l_verif, "l_sim": l_sim, "total": total}


def _snapshot(state):
    return [copy.deepcopy(o.state_dict()) for o in (state.generator, state.discriminator, state.opt_g, state.opt_d)]


def _restore(state, snap):
    for o, s in zip((state.generator, state.discriminator, state.opt_g, state.opt_d), snap):
        o.load_state_dict(s)


def train_step(state: TrainState, batch) -> TrainState:
    """One discriminator update then one generator update.

    On a non-finite loss the step is rolled back and a diagnostics record is
    appended; the step counter still advances so the RNG stream stays aligned.
    """
    x = stack(batch) if isinstance(batch, (list, tuple)) else batch
    G, D = state.generator, state.discriminator
    G.train()
    D.train()
    snap = _snapshot(state)
    rng = step_rng(state.config.seed, state.step)
    try:
        x_hat = G(x, stochastic=True, generator=rng)
        d_loss = discriminator_loss(D(x), D(x_hat.detach()))
        if not torch.isfinite(d_loss):
            raise NonFiniteLoss("d_loss")
        state.opt_d.zero_grad()
        d_loss.backward()
        state.opt_d.step()

        for p in D.parameters():
            p.requires_grad_(False)
        try:
            losses = generator_losses(state, x, x_hat)
        finally:
            for p in D.parameters():
                p.requires_grad_(True)
        if not torch.isfinite(losses["total"]):
            raise NonFiniteLoss("generator total")
        state.opt_g.zero_grad()
        losses["total"].backward()
        state.opt_g.step()
        D.zero_grad(set_to_none=True)
    except NonFiniteLoss as exc:
        _restore(state, snap)
        state.diagnostics.append({"step": state.step, "error": str(exc)})
        log.warning("step %d aborted: %s", state.step, exc)
        state.step += 1
        return state
    state.history.append(
        {
            "step": state.step,
            "d_loss": float(d_loss.detach()),
            "g_adv": float(losses["g_adv"].detach()),
            "l_verif": float(losses["l_verif"].detach()),
            "l_sim": float(losses["l_sim"].detach()),
            "total": float(losses["total"].detach()),
        }
    )
    state.step += 1
    return state


def batch_schedule(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([cfg.seed, epoch, 17]).permutation(n)
    return [order[s : s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    return math.ceil(n / cfg.batch_size)


def train(
    dataset,
    cfg: TrainConfig,
    verificator: LightCNN9 | None = None,
    resume: ckpt_io.Checkpoint | None = None,
    checkpoint_dir=None,
    max_steps: int | None = None,
    progress=None,
):
    """Run ``cfg.epochs`` epochs of shuffled minibatches (or stop at ``max_steps``).

    Returns (final Checkpoint, history). Resuming from a checkpoint written by
    this function continues the identical batch and dropout streams.
    """
    x_all = stack(dataset) if isinstance(dataset[0], FaceImage) else torch.as_tensor(dataset)
    if resume is not None:
        state = state_from_checkpoint(resume, verificator)
        cfg = state.config
    else:
        state = init_state(cfg, verificator)
    n = len(x_all)
    spe = steps_per_epoch(n, cfg)
    total_steps = cfg.epochs * spe
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    out_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    while state.step < total_steps:
        epoch, k = divmod(state.step, spe)
        idx = batch_schedule(n, cfg, epoch)[k]
        n_diag = len(state.diagnostics)
        train_step(state, x_all[torch.as_tensor(idx)])
        if len(state.diagnostics) > n_diag:
            if out_dir:
                ckpt_io.save(to_checkpoint(state), out_dir / "last_good.ppgn")
            raise NonFiniteLoss(state.diagnostics[-1]["error"])
        if progress:
            progress(state)
        if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            ckpt_io.save(to_checkpoint(state), out_dir / f"step_{state.step:06d}.ppgn")
    final = to_checkpoint(state)
    if out_dir:
        ckpt_io.save(final, out_dir / "final.ppgn")
    return final, list(state.history)


def _optimizer_arrays(prefix, opt, params):
    out = {}
    st = opt.state_dict()["state"]
    for i, _ in enumerate(params):
        if i in st:
            for key in ("step", "exp_avg", "exp_avg_sq"):
                out[f"{prefix}.{i}.{key}"] = st[i][key]
    return out


def to_checkpoint(state: TrainState) -> ckpt_io.Checkpoint:
    arrays = {}
    for prefix, mod in (("generator", state.generator), ("discriminator", state.discriminator)):
        for k, v in mod.state_dict().items():
            arrays[f"{prefix}.{k}"] = v
    arrays.update(_optimizer_arrays("opt_g", state.opt_g, list(state.generator.parameters())))
    arrays.update(_optimizer_arrays("opt_d", state.opt_d, list(state.discriminator.parameters())))
    if state.verificator is not None:
        for k, v in state.verificator.state_dict().items():
            arrays[f"verificator.{k}"] = v
    if state.history:
        arrays["history"] = torch.tensor([[h[f] for f in HISTORY_FIELDS] for h in state.history], dtype=torch.float64)
    return ckpt_io.Checkpoint(
        module_name="ppgan",
        config=state.config.to_dict(),
        step=state.step,
        arrays={k: v.detach().cpu().numpy() for k, v in arrays.items()},
        frozen=False,
    )


def _sub(arrays, prefix):
    n = len(prefix) + 1
    return {k[n:]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix + ".")}


def _load_module(mod, arrays):
    ref = mod.state_dict()
    mod.load_state_dict({k: arrays[k].to(ref[k].dtype).reshape(ref[k].shape) for k in ref})


def _load_optimizer(opt, arrays, params):
    sd = opt.state_dict()
    state = {}
    for i, p in enumerate(params):
        if f"{i}.step" in arrays:
            state[i] = {
                "step": arrays[f"{i}.step"].to(torch.float32).reshape(()),
                "exp_avg": arrays[f"{i}.exp_avg"].to(p.dtype).reshape(p.shape),
                "exp_avg_sq": arrays[f"{i}.exp_avg_sq"].to(p.dtype).reshape(p.shape),
            }
    sd["state"] = state
    opt.load_state_dict(sd)


def state_from_checkpoint(ck: ckpt_io.Checkpoint, verificator: LightCNN9 | None = None) -> TrainState:
    cfg = TrainConfig.from_dict(ck.config)
    if verificator is None and any(k.startswith("verificator.") for k in ck.arrays):
        verificator = verificator_from_arrays(_sub(ck.arrays, "verificator"), cfg.verif_width)
    state = init_state(cfg, verificator)
    _load_module(state.generator, _sub(ck.arrays, "generator"))
    _load_module(state.discriminator, _sub(ck.arrays, "discriminator"))
    _load_optimizer(state.opt_g, _sub(ck.arrays, "opt_g"), list(state.generator.parameters()))
    _load_optimizer(state.opt_d, _sub(ck.arrays, "opt_d"), list(state.discriminator.parameters()))
    state.step = ck.step
    if "history" in ck.arrays:
        for row in np.asarray(ck.arrays["history"]).reshape(-1, len(HISTORY_FIELDS)):
            h = dict(zip(HISTORY_FIELDS, (float(v) for v in row)))
            h["step"] = int(h["step"])
            state.history.append(h)
    return state


def verificator_from_arrays(arrays, width: float) -> LightCNN9:
    from .verificator import build_verificator

    v = build_verificator(0, width)
    _load_module(v, arrays)
    return v.freeze().eval()


def generator_from_checkpoint(ck: ckpt_io.Checkpoint) -> UNetGenerator:
    cfg = TrainConfig.from_dict(ck.config)
    g = build_generator(cfg.seed, cfg.gen_width)
    _load_module(g, _sub(ck.arrays, "generator"))
    return g.eval()


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for h in history:
            w.writerow([h["step"]] + [repr(float(h[f])) for f in HISTORY_FIELDS[1:]])
