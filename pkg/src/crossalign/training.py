"""Shared minibatch loop for the three stages.

Randomness is derived from ``(seed, stage, step)`` so a resumed run only
needs the step counter, the parameters and the AdamW moments to continue
bit-exactly.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .errors import ContractError, NoTermsError
from .numcore import ParamStore

log = logging.getLogger("crossalign")

STAGE_IDS = {"instance": 1, "scene": 2, "unified": 3}


def term_name(key) -> str:
    if isinstance(key, tuple):
        return "-".join(getattr(k, "value", str(k)) for k in key)
    return str(key)


def epoch_order(cfg: RunConfig, stage: str, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, STAGE_IDS[stage], 0, epoch]).permutation(n)


def step_rng(cfg: RunConfig, stage: str, step: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STAGE_IDS[stage], 1, step])


class StageRunner:
    """Runs one stage; ``on_epoch`` receives the per-epoch log record,
    ``on_checkpoint(stage, store, state)`` is called every ``cfg.checkpoint_every`` steps."""

    def __init__(self, stage: str, cfg: RunConfig, *, on_epoch: Callable[[dict], None] | None = None,
                 on_checkpoint: Callable | None = None, state: dict | None = None):
        self.stage = stage
        self.cfg = cfg
        self.on_epoch = on_epoch
        self.on_checkpoint = on_checkpoint
        self.state = state or {"step": 0, "acc_sum": 0.0, "acc_count": 0, "acc_terms": {}}

    def run(self, store: ParamStore, prefix: str, scenes: list, loss_fn: Callable,
            trainable: tuple[str, ...] | None = None) -> list[dict]:
        cfg = self.cfg
        trainable = trainable or (prefix,)
        stray = [p for p in trainable if not p.startswith(prefix)]
        if stray:
            raise ContractError(f"{self.stage} stage would update upstream parameters {stray}; "
                                "earlier stages must stay frozen")
        n = len(scenes)
        per_epoch = -(-n // cfg.batch_scenes)
        total = cfg.stage_steps(self.stage, n)
        history = []
        saved, store.trainable = store.trainable, trainable
        try:
            while self.state["step"] < total:
                step = self.state["step"]
                epoch, pos = divmod(step, per_epoch)
                order = epoch_order(cfg, self.stage, epoch, n)
                batch = [scenes[i] for i in order[pos * cfg.batch_scenes:(pos + 1) * cfg.batch_scenes]]
                record = self._step(store, batch, loss_fn, step)
                if record is not None:
                    history.append(record)
                self.state["step"] = step + 1
                if pos == per_epoch - 1 or step + 1 == total:
                    self._flush(epoch, step + 1)
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and self.on_checkpoint:
                    self.on_checkpoint(self.stage, store, dict(self.state, acc_terms=dict(self.state["acc_terms"])))
        finally:
            store.trainable = saved
        return history

    def _step(self, store, batch, loss_fn, step):
        cfg = self.cfg
        with nc.Tape() as tape:
            try:
                loss, terms = loss_fn(batch, step_rng(cfg, self.stage, step))
            except NoTermsError:
                # every term masked in this batch: nothing to learn, no update
                return None
        grads = nc.backward(tape, loss)
        stray = [k for k in grads if not any(k.startswith(p) for p in store.trainable)]
        if stray:
            raise ContractError(f"gradient reached frozen parameters: {stray[:3]}")
        lr = nc.cosine_restart_lr(step, cfg.restart_period, cfg.lr, cfg.lr_min, cfg.restart_mult)
        if lr > 0:
            # the schedule touches lr_min (often 0) at the end of each cycle
            nc.adamw_step(store, grads, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
        value = float(loss.data)
        term_values = {term_name(k): float(t.data) for k, t in terms.items()}
        self.state["acc_sum"] += value
        self.state["acc_count"] += 1
        for k, v in term_values.items():
            self.state["acc_terms"][k] = self.state["acc_terms"].get(k, 0.0) + v
        return {"step": step, "loss": value, "lr": lr, "terms": term_values}

    def _flush(self, epoch: int, step: int):
        c = self.state["acc_count"]
        rec = {"stage": self.stage, "epoch": epoch, "step": step,
               "loss": self.state["acc_sum"] / c if c else None,
               "terms": {k: v / c for k, v in sorted(self.state["acc_terms"].items())} if c else {}}
        log.debug("%s", rec)
        if self.on_epoch:
            self.on_epoch(rec)
        self.state.update(acc_sum=0.0, acc_count=0, acc_terms={})


def state_to_tensors(state: dict) -> dict[str, np.ndarray]:
    out = {"meta/step": np.array(float(state["step"])),
           "meta/acc_sum": np.array(state["acc_sum"]),
           "meta/acc_count": np.array(float(state["acc_count"]))}
    out.update({f"meta/acc_term/{k}": np.array(v) for k, v in state["acc_terms"].items()})
    return out


def state_from_tensors(tensors: dict) -> dict:
    return {"step": int(tensors["meta/step"]),
            "acc_sum": float(tensors["meta/acc_sum"]),
            "acc_count": int(tensors["meta/acc_count"]),
            "acc_terms": {k[len("meta/acc_term/"):]: float(v) for k, v in tensors.items()
                          if k.startswith("meta/acc_term/")}}
