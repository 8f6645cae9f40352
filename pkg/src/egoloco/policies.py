"""Policy architectures for both training phases.

Phase-1 teachers:

* :class:`MonolithicPolicy` compresses scandots with an MLP encoder and feeds
  the code, proprioception and command to a GRU whose state drives a
  feed-forward action head.
* :class:`RmaPolicy` runs a GRU over scandots (terrain latent), an MLP over the
  privileged extrinsics and a memoryless base MLP over everything.

Phase-2 students reuse these pieces: a monolithic student is a
``MonolithicPolicy`` whose encoder reads depth instead of scandots, and
:class:`RmaStudent` regresses the teacher's two latents from depth and
proprioception.

Each architecture exposes ``nets`` (name -> network) and ``extras`` (name ->
raw arrays such as the log-std); :func:`flat_params` flattens both into the
``"net.key"`` dict used by the optimizer and checkpoints.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .nn import (Gru, Mlp, bptt_gradients, gru_unroll, load_checkpoint, save_checkpoint,
                 zeros_like_params)
from .observe import N_DEPTH, N_SCANDOTS, PROPRIO_DIM

CMD_DIM = 1
PRIV_DIM = 4
DEPTH_SHIFT = 1.0
LOG_2PI = np.log(2.0 * np.pi)


def flat_params(policy, names=None):
    out = {}
    for name, net in policy.nets.items():
        if names is not None and name not in names:
            continue
        for k, v in net.params.items():
            out[f"{name}.{k}"] = v
    for name, arr in policy.extras.items():
        if names is None or name in names:
            out[name] = arr
    return out


def set_flat_params(policy, flat):
    for key, value in flat.items():
        if "." in key:
            name, k = key.split(".", 1)
            policy.nets[name].params[k] = value
        else:
            policy.extras[key] = value


def zero_grads(policy, names=None):
    return {k: np.zeros_like(v) for k, v in flat_params(policy, names).items()}


def params_hash(policy, names=None):
    """SHA-256 over the raw bytes of the selected parameters (sorted by key)."""
    h = hashlib.sha256()
    for k, v in sorted(flat_params(policy, names).items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
    return h.hexdigest()


def copy_params(src, dst, names):
    for name in names:
        if name in src.nets:
            dst.nets[name].params = {k: v.copy() for k, v in src.nets[name].params.items()}
        else:
            dst.extras[name] = src.extras[name].copy()


def _sub(grads, name):
    """View of the flat gradient dict for one sub-network (shared arrays)."""
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in grads.items() if k.startswith(prefix)}


def _forward_tb(net, x):
    """Run an MLP over (T, B, in) one time slice at a time.

    The stacked matmul reproduces the per-step arithmetic of ``act`` bit for
    bit, whereas a flattened (T*B, in) product may sum in a different order.
    The cache is flattened so ``backward`` can take (T*B, out) gradients.
    """
    y, acts = net.forward(x)
    return y, [a.reshape(-1, a.shape[-1]) for a in acts]


def gaussian_logp(actions, mean, log_std):
    std = np.exp(log_std)
    z = (actions - mean) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std):
    return float(np.sum(0.5 + 0.5 * LOG_2PI + log_std))


def _seq(obs, key):
    return np.asarray(obs[key], dtype=float)


class MonolithicPolicy:
    """gamma = MLP(m); a = F(GRU(x, gamma, u)).  ``encoder_key`` picks the encoder input."""

    arch = "monolithic"

    def __init__(self, rng=None, hidden=(128, 64), gru_size=64, latent=32, init_std=0.3,
                 encoder_key="scandots", critic=True):
        rng = np.random.default_rng(0) if rng is None else rng
        self.encoder_key = encoder_key
        self.latent = latent
        self.gru_size = gru_size
        self.hidden = tuple(hidden)
        enc_in = N_DEPTH if encoder_key == "depth" else N_SCANDOTS
        self.nets = {
            "encoder": Mlp([enc_in, *hidden, latent], rng),
            "gru": Gru(PROPRIO_DIM + latent + CMD_DIM, gru_size, rng),
            "head": Mlp([gru_size, *hidden, 4], rng, out_scale=0.1),
        }
        if critic:
            self.nets["critic"] = Mlp([PROPRIO_DIM + N_SCANDOTS + CMD_DIM, *hidden, 1], rng,
                                      out_scale=0.1)
        self.extras = {"log_std": np.full(4, np.log(init_std))}

    @property
    def actor_names(self):
        return ("encoder", "gru", "head", "log_std")

    @property
    def state_size(self):
        return self.gru_size

    def initial_state(self, n):
        return np.zeros((n, self.gru_size))

    def _encoder_input(self, obs):
        v = _seq(obs, self.encoder_key)
        return v - DEPTH_SHIFT if self.encoder_key == "depth" else v

    def act(self, obs, h):
        """One step for a batch.  Returns ``(mean, h_new)``."""
        g = self.nets["encoder"](self._encoder_input(obs))
        xin = np.concatenate([_seq(obs, "proprio"), g, _seq(obs, "command")], axis=-1)
        h_new, y, _ = self.nets["gru"].step(h, xin)
        return self.nets["head"](y), h_new

    def value(self, obs):
        xin = np.concatenate([_seq(obs, "proprio"), _seq(obs, "scandots"),
                              _seq(obs, "command")], axis=-1)
        return self.nets["critic"](xin)[..., 0]

    def value_forward(self, obs):
        xin = np.concatenate([_seq(obs, "proprio"), _seq(obs, "scandots"),
                              _seq(obs, "command")], axis=-1)
        v, cache = self.nets["critic"].forward(xin)
        return v[..., 0], cache

    def forward_sequence(self, obs, h0, keep):
        """Unroll over (T, B, ...) observations; ``keep[t]`` zeroes the state before step t."""
        T, B = keep.shape
        enc = self.nets["encoder"]
        g, enc_cache = _forward_tb(enc, self._encoder_input(obs))
        xin = np.concatenate([_seq(obs, "proprio"), g, _seq(obs, "command")], axis=-1)
        seg = gru_unroll(self.nets["gru"], h0, xin, keep, truncation=max(T, 1))
        mean, head_cache = _forward_tb(self.nets["head"], np.stack(seg.outputs))
        cache = {"enc": enc_cache, "seg": seg, "head": head_cache, "T": T, "B": B}
        return mean.reshape(T, B, 4), cache

    def backward_sequence(self, cache, dmean, grads):
        T, B = cache["T"], cache["B"]
        dy = self.nets["head"].backward(cache["head"], dmean.reshape(T * B, 4),
                                        _sub(grads, "head"))
        _, dxs = bptt_gradients(self.nets["gru"], cache["seg"], dy.reshape(T, B, -1),
                                _sub(grads, "gru"), truncation=max(T, 1))
        dx = np.stack(dxs)
        dg = dx[..., PROPRIO_DIM:PROPRIO_DIM + self.latent]
        self.nets["encoder"].backward(cache["enc"], dg.reshape(T * B, -1),
                                      _sub(grads, "encoder"))
        return grads

    def student(self, rng=None, encoder_key="depth", copy_encoder=False):
        """A phase-2 student: copies of the recurrent core, head and log-std."""
        rng = np.random.default_rng(1) if rng is None else rng
        s = MonolithicPolicy(rng, self.hidden, self.gru_size, self.latent,
                             float(np.exp(self.extras["log_std"][0])), encoder_key, critic=False)
        names = ["gru", "head", "log_std"] + (["encoder"] if copy_encoder else [])
        copy_params(self, s, names)
        return s


class RmaPolicy:
    """gamma = GRU(m); z = MLP(e); a = MLP(x, gamma, z, u)."""

    arch = "rma"

    def __init__(self, rng=None, hidden=(128, 64), latent=32, z_dim=8, init_std=0.3,
                 critic=True, **_):
        rng = np.random.default_rng(0) if rng is None else rng
        self.latent = latent
        self.z_dim = z_dim
        self.hidden = tuple(hidden)
        self.encoder_key = "scandots"
        self.nets = {
            "scan_gru": Gru(N_SCANDOTS, latent, rng),
            "priv": Mlp([PRIV_DIM, *hidden, z_dim], rng),
            "base": Mlp([PROPRIO_DIM + latent + z_dim + CMD_DIM, *hidden, 4], rng,
                        out_scale=0.1),
        }
        if critic:
            self.nets["critic"] = Mlp([PROPRIO_DIM + N_SCANDOTS + PRIV_DIM + CMD_DIM, *hidden, 1],
                                      rng, out_scale=0.1)
        self.extras = {"log_std": np.full(4, np.log(init_std))}

    @property
    def actor_names(self):
        return ("scan_gru", "priv", "base", "log_std")

    @property
    def state_size(self):
        return self.latent

    def initial_state(self, n):
        return np.zeros((n, self.latent))

    def latents(self, obs, h):
        gamma, _, _ = self.nets["scan_gru"].step(h, _seq(obs, "scandots"))
        z = self.nets["priv"](_seq(obs, "privileged"))
        return gamma, z

    def base_action(self, obs, gamma, z):
        xin = np.concatenate([_seq(obs, "proprio"), gamma, z, _seq(obs, "command")], axis=-1)
        return self.nets["base"](xin)

    def act(self, obs, h):
        gamma, z = self.latents(obs, h)
        return self.base_action(obs, gamma, z), gamma

    def _critic_in(self, obs):
        return np.concatenate([_seq(obs, "proprio"), _seq(obs, "scandots"),
                               _seq(obs, "privileged"), _seq(obs, "command")], axis=-1)

    def value(self, obs):
        return self.nets["critic"](self._critic_in(obs))[..., 0]

    def value_forward(self, obs):
        v, cache = self.nets["critic"].forward(self._critic_in(obs))
        return v[..., 0], cache

    def forward_sequence(self, obs, h0, keep):
        T, B = keep.shape
        seg = gru_unroll(self.nets["scan_gru"], h0, _seq(obs, "scandots"), keep,
                         truncation=max(T, 1))
        gam = np.stack(seg.outputs)
        z, priv_cache = self.nets["priv"].forward(_seq(obs, "privileged").reshape(T * B, -1))
        xin = np.concatenate([_seq(obs, "proprio"), gam, z.reshape(T, B, -1),
                              _seq(obs, "command")], axis=-1)
        mean, base_cache = self.nets["base"].forward(xin.reshape(T * B, -1))
        cache = {"seg": seg, "priv": priv_cache, "base": base_cache, "T": T, "B": B}
        return mean.reshape(T, B, 4), cache

    def backward_sequence(self, cache, dmean, grads):
        T, B = cache["T"], cache["B"]
        dx = self.nets["base"].backward(cache["base"], dmean.reshape(T * B, 4),
                                        _sub(grads, "base"))
        dx = dx.reshape(T, B, -1)
        L, Z = self.latent, self.z_dim
        dgam = dx[..., PROPRIO_DIM:PROPRIO_DIM + L]
        dz = dx[..., PROPRIO_DIM + L:PROPRIO_DIM + L + Z]
        self.nets["priv"].backward(cache["priv"], dz.reshape(T * B, -1), _sub(grads, "priv"))
        bptt_gradients(self.nets["scan_gru"], cache["seg"], dgam, _sub(grads, "scan_gru"),
                       truncation=max(T, 1))
        return grads


class RmaStudent:
    """Estimates the teacher's latents.  The vision branch (encoder + GRU + linear
    read-out) regresses gamma from depth, proprioception and command; the
    proprioceptive branch regresses z.  ``base`` is a frozen copy of the
    teacher's base MLP."""

    arch = "rma_student"

    def __init__(self, teacher, rng=None, gru_size=64, encoder_key="depth"):
        rng = np.random.default_rng(1) if rng is None else rng
        hidden = teacher.hidden
        self.hidden = tuple(hidden)
        self.encoder_key = encoder_key
        self.latent = teacher.latent
        self.z_dim = teacher.z_dim
        self.gru_size = gru_size
        enc_in = N_DEPTH if encoder_key == "depth" else N_SCANDOTS
        self.nets = {
            "encoder": Mlp([enc_in, *hidden, self.latent], rng),
            "vis_gru": Gru(PROPRIO_DIM + CMD_DIM + self.latent, gru_size, rng),
            "vis_out": Mlp([gru_size, self.latent], rng),
            "prop_gru": Gru(PROPRIO_DIM + CMD_DIM, gru_size, rng),
            "prop_out": Mlp([gru_size, self.z_dim], rng),
            "base": Mlp(list(teacher.nets["base"].sizes), rng),
        }
        self.extras = {"log_std": teacher.extras["log_std"].copy()}
        copy_params(teacher, self, ["base"])

    trainable = ("encoder", "vis_gru", "vis_out", "prop_gru", "prop_out")

    @property
    def actor_names(self):
        return self.trainable

    @property
    def state_size(self):
        return 2 * self.gru_size

    def initial_state(self, n):
        return np.zeros((n, 2 * self.gru_size))

    def _encoder_input(self, obs):
        v = _seq(obs, self.encoder_key)
        return v - DEPTH_SHIFT if self.encoder_key == "depth" else v

    def latents(self, obs, h):
        H = self.gru_size
        d = self.nets["encoder"](self._encoder_input(obs))
        xu = np.concatenate([_seq(obs, "proprio"), _seq(obs, "command")], axis=-1)
        hv, _, _ = self.nets["vis_gru"].step(h[..., :H], np.concatenate([xu, d], axis=-1))
        hp, _, _ = self.nets["prop_gru"].step(h[..., H:], xu)
        gamma = self.nets["vis_out"](hv)
        z = self.nets["prop_out"](hp)
        return gamma, z, np.concatenate([hv, hp], axis=-1)

    def base_action(self, obs, gamma, z):
        xin = np.concatenate([_seq(obs, "proprio"), gamma, z, _seq(obs, "command")], axis=-1)
        return self.nets["base"](xin)

    def act(self, obs, h):
        gamma, z, h_new = self.latents(obs, h)
        return self.base_action(obs, gamma, z), h_new

    def forward_sequence(self, obs, h0, keep):
        """Latent estimates over (T, B, ...).  Returns ``((gamma_hat, z_hat), cache)``."""
        T, B = keep.shape
        H = self.gru_size
        d, enc_cache = self.nets["encoder"].forward(self._encoder_input(obs).reshape(T * B, -1))
        xu = np.concatenate([_seq(obs, "proprio"), _seq(obs, "command")], axis=-1)
        vis_in = np.concatenate([xu, d.reshape(T, B, -1)], axis=-1)
        seg_v = gru_unroll(self.nets["vis_gru"], h0[..., :H], vis_in, keep, truncation=max(T, 1))
        seg_p = gru_unroll(self.nets["prop_gru"], h0[..., H:], xu, keep, truncation=max(T, 1))
        hv = np.stack(seg_v.outputs).reshape(T * B, -1)
        hp = np.stack(seg_p.outputs).reshape(T * B, -1)
        gamma, vo_cache = self.nets["vis_out"].forward(hv)
        z, po_cache = self.nets["prop_out"].forward(hp)
        cache = {"enc": enc_cache, "seg_v": seg_v, "seg_p": seg_p, "vo": vo_cache,
                 "po": po_cache, "T": T, "B": B}
        return (gamma.reshape(T, B, -1), z.reshape(T, B, -1)), cache

    def backward_sequence(self, cache, dgamma, dz, grads):
        T, B = cache["T"], cache["B"]
        dhv = self.nets["vis_out"].backward(cache["vo"], dgamma.reshape(T * B, -1),
                                            _sub(grads, "vis_out"))
        dhp = self.nets["prop_out"].backward(cache["po"], dz.reshape(T * B, -1),
                                             _sub(grads, "prop_out"))
        _, dxs = bptt_gradients(self.nets["vis_gru"], cache["seg_v"], dhv.reshape(T, B, -1),
                                _sub(grads, "vis_gru"), truncation=max(T, 1))
        bptt_gradients(self.nets["prop_gru"], cache["seg_p"], dhp.reshape(T, B, -1),
                       _sub(grads, "prop_gru"), truncation=max(T, 1))
        dd = np.stack(dxs)[..., PROPRIO_DIM + CMD_DIM:]
        self.nets["encoder"].backward(cache["enc"], dd.reshape(T * B, -1),
                                      _sub(grads, "encoder"))
        return grads


ARCHITECTURES = {"monolithic": MonolithicPolicy, "rma": RmaPolicy}


def make_policy(arch, rng=None, **kw):
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}") from None
    return cls(rng, **kw)


def policy_meta(policy):
    meta = {"arch": policy.arch, "encoder_key": policy.encoder_key,
            "hidden": list(getattr(policy, "hidden", ()))}
    for attr in ("latent", "gru_size", "z_dim"):
        if hasattr(policy, attr):
            meta[attr] = getattr(policy, attr)
    return meta


def save_policy(path, policy):
    """Checkpoint every parameter of ``policy`` plus the metadata needed to rebuild it."""
    return save_checkpoint(path, flat_params(policy), policy_meta(policy))


def load_policy(path):
    params, meta = load_checkpoint(path)
    arch = meta.get("arch")
    hidden = tuple(meta.get("hidden", (128, 64)))
    has_critic = any(k.startswith("critic.") for k in params)
    if arch == "monolithic":
        pol = MonolithicPolicy(None, hidden, meta["gru_size"], meta["latent"],
                               encoder_key=meta["encoder_key"], critic=has_critic)
    elif arch == "rma":
        pol = RmaPolicy(None, hidden, meta["latent"], meta["z_dim"], critic=has_critic)
    elif arch == "rma_student":
        shell = RmaPolicy(None, hidden, meta["latent"], meta["z_dim"], critic=False)
        pol = RmaStudent(shell, None, meta["gru_size"], meta["encoder_key"])
    else:
        raise ValueError(f"checkpoint has unknown architecture {arch!r}")
    expected = flat_params(pol)
    if sorted(expected) != sorted(params):
        raise ValueError("checkpoint parameters do not match the rebuilt network")
    for k, v in params.items():
        if v.shape != expected[k].shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {expected[k].shape}")
    set_flat_params(pol, params)
    return pol
