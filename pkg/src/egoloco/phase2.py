"""Phase 2: distil a scandot teacher into a depth-driven student.

The environment is always stepped with the *student's* actions and the
teacher only labels the visited states.  Every iteration unrolls ``T`` steps,
takes a single optimizer step on the summed loss and then carries the
student's hidden state forward as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, TRUNCATION, adam_update, clip_grad_norm
from .policies import (MonolithicPolicy, RmaPolicy, RmaStudent, flat_params, set_flat_params,
                       zero_grads)

DISTILL_KEYS = ("proprio", "scandots", "noisy_scandots", "depth", "command", "privileged")


@dataclass
class DistillState:
    """Rollout state carried between iterations."""

    obs: dict
    h_teacher: np.ndarray
    h_student: np.ndarray
    keep_next: np.ndarray
    steps: int = 0
    episodes: list = field(default_factory=list)


def start(env, teacher, student):
    obs = env.reset()
    return DistillState(obs, teacher.initial_state(env.n), student.initial_state(env.n),
                        np.ones(env.n))


def _pick(obs):
    return {k: obs[k] for k in DISTILL_KEYS if k in obs}


def _stack(seq):
    return {k: np.stack([o[k] for o in seq]) for k in seq[0]}


def _unroll(env, teacher, student, st, T, label_fn, act_fn):
    """Shared rollout loop; returns stacked obs, keep masks, teacher labels and
    the student's detached starting state."""
    obs_seq, keeps, labels = [], [], []
    h0 = None
    for t in range(T):
        keep = st.keep_next
        h_t = st.h_teacher * keep[:, None]
        h_s = st.h_student * keep[:, None]
        if t == 0:
            h0 = h_s.copy()
            keep = np.ones(env.n)
        o = _pick(st.obs)
        label, st.h_teacher = label_fn(o, h_t)
        a2, st.h_student = act_fn(o, h_s)
        res = env.step(a2)
        done = res.terminated | res.truncated
        if "episodes" in res.info:
            st.episodes.append(res.info["episodes"])
        obs_seq.append(o)
        keeps.append(keep)
        labels.append(label)
        st.keep_next = (~done).astype(float)
        st.obs = res.obs
        st.steps += env.n
    return _stack(obs_seq), np.stack(keeps), labels, h0


def dagger_iteration(teacher, student, env, st, adam, T=TRUNCATION, max_grad_norm=1.0):
    """One pass of the DAgger loop for a monolithic student.

    Loss is ``sum_t mean_b ||a1 - a2||^2`` over the ``T`` unrolled steps.
    Returns a stats dict; the teacher is only ever read.
    """
    def label(o, h):
        return teacher.act(o, h)

    def act(o, h):
        return student.act(o, h)

    obs, keep, labels, h0 = _unroll(env, teacher, student, st, T, label, act)
    a1 = np.stack([l for l in labels])
    a2, cache = student.forward_sequence(obs, h0, keep)
    diff = a2 - a1
    B = diff.shape[1]
    loss = float(np.sum(diff * diff) / B)
    gaps = np.linalg.norm(diff, axis=-1)
    stats = {"loss": loss, "action_mse": float(np.mean(np.sum(diff * diff, axis=-1))),
             "eta_max": float(gaps.max()), "eta_p95": float(np.percentile(gaps, 95)),
             "skipped": False}
    if not np.isfinite(loss):
        stats["skipped"] = True
        return stats
    names = ("encoder", "gru", "head")
    grads = zero_grads(student, names)
    student.backward_sequence(cache, 2.0 * diff / B, grads)
    clip_grad_norm(grads, max_grad_norm)
    new, _ = adam_update(flat_params(student, names), grads, adam)
    set_flat_params(student, new)
    # detach: the carried hidden state is a plain array, nothing links it to this graph
    st.h_student = np.array(st.h_student, copy=True)
    return stats


def rma_distill_iteration(teacher, student, env, st, adam, T=TRUNCATION, max_grad_norm=1.0):
    """Latent regression for an RMA student: ||gamma_hat - gamma||^2 and
    ||z_hat - z||^2, summed over steps and averaged over environments.  The
    base MLP is shared and frozen; its gradient is reported and must be zero."""
    def label(o, h):
        gamma, z = teacher.latents(o, h)
        return (gamma, z), gamma

    def act(o, h):
        g, z, h_new = student.latents(o, h)
        return student.base_action(o, g, z), h_new

    obs, keep, labels, h0 = _unroll(env, teacher, student, st, T, label, act)
    gamma = np.stack([l[0] for l in labels])
    z = np.stack([l[1] for l in labels])
    (g_hat, z_hat), cache = student.forward_sequence(obs, h0, keep)
    dg, dz = g_hat - gamma, z_hat - z
    B = dg.shape[1]
    g_loss = float(np.sum(dg * dg) / B)
    z_loss = float(np.sum(dz * dz) / B)
    stats = {"loss": g_loss + z_loss, "gamma_mse": float(np.mean(np.sum(dg * dg, axis=-1))),
             "z_mse": float(np.mean(np.sum(dz * dz, axis=-1))), "skipped": False}
    if not np.isfinite(g_loss + z_loss):
        stats["skipped"] = True
        return stats
    names = student.trainable + ("base",)
    grads = zero_grads(student, names)
    student.backward_sequence(cache, 2.0 * dg / B, 2.0 * dz / B, grads)
    base_grad = max(float(np.max(np.abs(v))) for k, v in grads.items() if k.startswith("base."))
    stats["base_grad"] = base_grad
    train = {k: v for k, v in grads.items() if not k.startswith("base.")}
    clip_grad_norm(train, max_grad_norm)
    new, _ = adam_update(flat_params(student, student.trainable), train, adam)
    set_flat_params(student, new)
    st.h_student = np.array(st.h_student, copy=True)
    return stats


def distill(teacher, student, env, iterations, lr=5e-4, T=TRUNCATION, log=None):
    """Run ``iterations`` phase-2 iterations; returns the per-iteration stats."""
    adam = AdamState(lr=lr)
    st = start(env, teacher, student)
    step = rma_distill_iteration if isinstance(student, RmaStudent) else dagger_iteration
    history = []
    for it in range(iterations):
        s = step(teacher, student, env, st, adam, T)
        s["iteration"] = it
        s["env_steps"] = st.steps
        history.append(s)
        if log is not None:
            log(s)
    return history


def make_student(teacher, rng=None, encoder_key="depth"):
    """Student matching ``teacher``'s architecture.  A noisy-elevation student keeps
    the teacher's scandot encoder as its starting point."""
    if isinstance(teacher, RmaPolicy):
        return RmaStudent(teacher, rng, encoder_key=encoder_key)
    if isinstance(teacher, MonolithicPolicy):
        return teacher.student(rng, encoder_key=encoder_key,
                               copy_encoder=encoder_key != "depth")
    raise TypeError(f"no student for {type(teacher).__name__}")


def evaluate_distillation(teacher, student, env, steps):
    """Roll out the student for ``steps`` control steps and measure the action
    gap ``||a1 - a2||`` against the teacher on every visited state."""
    st = start(env, teacher, student)
    gaps = []
    for _ in range(steps):
        keep = st.keep_next
        h_t = st.h_teacher * keep[:, None]
        h_s = st.h_student * keep[:, None]
        o = _pick(st.obs)
        a1, st.h_teacher = teacher.act(o, h_t)
        a2, st.h_student = student.act(o, h_s)
        gaps.append(np.linalg.norm(a1 - a2, axis=-1))
        res = env.step(a2)
        st.keep_next = (~(res.terminated | res.truncated)).astype(float)
        st.obs = res.obs
    g = np.concatenate(gaps)
    return {"eta_max": float(g.max()), "eta_p95": float(np.percentile(g, 95)),
            "eta_mean": float(g.mean()), "samples": int(g.size)}
